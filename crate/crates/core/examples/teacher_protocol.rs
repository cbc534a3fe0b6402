//! A teacher served over TCP. The client flattens the student's per-position
//! TopK sets into one union, sends a single request, and cuts the per-position
//! maps back out of the returned matrix.

use std::net::TcpListener;
use std::sync::Arc;

use opdlab::config::ModelSection;
use opdlab::policy::Policy;
use opdlab::prob::Logits;
use opdlab::protocol::{build_union, extract_position_maps, request_for, serve_tcp, Client, Scorer, ScoringModel, DEFAULT_UNION_CAP};
use opdlab::tasks::{Rule, TaskSpec};
use opdlab::rng::rng_for;
use opdlab::teacher::OracleTeacher;
use rand::Rng;

fn main() -> opdlab::Result<()> {
    let family = TaskSpec::shared_rule(Rule::Shift(2), 8, 1).build()?;
    let teacher = OracleTeacher::new(family.clone(), 0.5)?;
    let scorer = Arc::new(Scorer::new(ScoringModel::Oracle(teacher), DEFAULT_UNION_CAP));
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || serve_tcp(scorer, listener));
    println!("teacher listening on {addr}");

    // A student with random logits along the response: its TopK sets barely
    // overlap, so the union grows towards T * K.
    let mut student = Policy::new(family.vocab(), ModelSection::default().context_order)?;
    let inst = &family.instances()[0];
    let response = inst.reference_response(&family.task_vocab());
    let mut rng = rng_for(3, &[]);
    for t in 0..response.len() {
        let z = (0..family.vocab().size()).map(|_| rng.random_range(-2.0..2.0)).collect();
        student.set_logits(student.context(inst.prompt, &response[..t]), Logits::new(z)?)?;
    }
    let (req, sets) = request_for(&student, 1, inst.prompt, &[], &response, 4)?;
    let union = build_union(&sets)?;
    println!(
        "positions {}, K {}, |U| {} (amplification {:.2})",
        sets.len(),
        union.k,
        union.tokens.len(),
        union.amplification
    );

    let mut client = Client::connect(addr)?;
    let resp = client.query(&req)?;
    println!("matrix {} x {}", resp.logprobs.len(), resp.logprobs[0].len());
    for (t, map) in extract_position_maps(&req.token_ids_logprob, &resp, &sets)?.iter().enumerate() {
        let cells: Vec<String> = map.iter().map(|(tok, lp)| format!("{tok:>2}:{lp:.3}")).collect();
        println!("  t={t} response token {:>2} ({:.3})  student top-4 {}", response[t], resp.sampled_logprobs[t], cells.join(" "));
    }
    Ok(())
}
