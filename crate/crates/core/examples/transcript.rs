//! Prints the text transcript of every bundled scenario.

use heapmend::recovery::orchestrate;
use heapmend::scenarios::ALL;

fn main() {
    for s in ALL {
        let (program, db) = s.load().expect("bundled scenario loads");
        let (res, events) = orchestrate(&program, &db, s.inputs.to_vec(), s.session_config());
        println!("=== {} ===", s.name);
        for e in &events {
            if let Some(t) = e.text() {
                println!("{t}");
            }
        }
        match res {
            Ok(sum) => println!(
                "-> completed, {} restore(s), {} report(s)",
                sum.restores,
                sum.reports.len()
            ),
            Err(e) => println!("-> error: {e}"),
        }
    }
}
