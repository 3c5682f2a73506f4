use recsched::central::*;
use recsched::model::Design;
use recsched::scenario::*;

#[test]
fn dbg_big() {
    let scenario = generate_synthetic(7, 55, Horizon::default(), PvLevel::High, 0.5);
    for design in [Design::D1, Design::D2] {
        let t0 = std::time::Instant::now();
        match solve_centralized(&scenario, design) {
            Ok(s) => println!("{design:?} OK obj={:.6} ({:?})", s.objective, t0.elapsed()),
            Err(e) => println!("{design:?} ERR {e} ({:?})", t0.elapsed()),
        }
    }
}
