//! Runs the default toy curriculum and prints the three reports.

use std::time::Instant;

use amnet::harness::{train, ExperimentConfig};

fn main() -> amnet::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Some(seed) = std::env::args().nth(1) {
        cfg.run.seed = seed.parse().expect("seed");
    }
    if let Some(path) = std::env::args().nth(2) {
        cfg = ExperimentConfig::load(path.as_ref())?;
    }
    let start = Instant::now();
    let out = train(&cfg)?;
    for phase in ["baseline", "branches", "pretrain", "avg", "amr"] {
        let recs: Vec<_> = out.log.iter().filter(|r| r.phase == phase).collect();
        if recs.is_empty() {
            continue;
        }
        let k = recs.len().min(10);
        let head: f64 = recs[..k].iter().map(|r| r.nll).sum::<f64>() / k as f64;
        let tail: f64 = recs[recs.len() - k..].iter().map(|r| r.nll).sum::<f64>() / k as f64;
        let ctail: f64 = recs[recs.len() - k..].iter().map(|r| r.compute).sum::<f64>() / k as f64;
        println!("{phase:>9}: nll {head:.3} -> {tail:.3}  compute {ctail:.4e}");
    }
    let base: Vec<f64> = out.log.iter().filter(|r| r.phase == "baseline").map(|r| r.nll).collect();
    let curve: Vec<String> = base.chunks(100).map(|c| format!("{:.2}", c.iter().sum::<f64>() / c.len() as f64)).collect();
    println!("baseline curve {}", curve.join(" "));
    println!("pretrain slow fraction {:.3}", out.pretrain_slow_fraction);
    println!("lambda avg {:.3e} amr {:.3e}", out.lambda_avg, out.lambda_amr);
    for r in [&out.baseline_report, &out.avg_report, &out.amr_report] {
        println!("{}", r.to_json_line());
    }
    println!("costs {:?}", out.amr_model.encoder_costs());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
