//! Trains the three model variants on the reference corpus and prints
//! held-out RS for each.
//!
//! cargo run --release --example ablation -- [seed] [epochs]

use std::time::Instant;

use vrlayout::layoutmodel::{dataset_rs, evaluate_losses, train, Mode, ModelDims, ModelParams, TrainConfig};
use vrlayout::synthdata::{generate_dataset, split, EdgeBudget, GeneratorConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(42);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let env = |k: &str| std::env::var(k).ok();
    let edges = match env("EDGES").as_deref() {
        Some("all") => EdgeBudget::AllConsistent,
        Some(n) => EdgeBudget::Count(n.parse()?),
        None => EdgeBudget::Count(4),
    };
    let gen = GeneratorConfig {
        seed,
        edges_per_scene: edges,
        min_box_side: env("MIN_SIDE").map_or(Ok(0.1), |s| s.parse())?,
        max_box_side: env("MAX_SIDE").map_or(Ok(0.5), |s| s.parse())?,
        ..GeneratorConfig::reference()
    };
    let (train_set, held_out) = split(&generate_dataset(&gen)?, 200);
    let lr: f64 = env("LR").map_or(Ok(1e-3), |s| s.parse())?;
    let modes: Vec<Mode> = match env("MODES") {
        Some(m) => m.split(',').map(|s| s.parse()).collect::<Result<_, _>>()?,
        None => Mode::ALL.to_vec(),
    };
    for mode in modes {
        let config = TrainConfig {
            epochs,
            seed,
            mode,
            lr,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let dims = ModelDims::new(
            train_set.vocab.num_categories(),
            train_set.vocab.num_predicates(),
            config.arch,
        );
        let initial = evaluate_losses(&ModelParams::init(dims, seed), &train_set, &config)?;
        let (params, history) = train(&train_set, None, &config)?;
        let fin = evaluate_losses(&params, &train_set, &config)?;
        let rs = dataset_rs(&params, &held_out, mode)?;
        let mut betas = Vec::new();
        for s in &held_out.scenes {
            betas.extend(vrlayout::layoutmodel::forward(&s.graph, &params, mode, None)?.betas);
        }
        let mean_beta = betas.iter().sum::<f64>() / betas.len() as f64;
        print!("beta {mean_beta:.3} ");
        let train_rs = dataset_rs(&params, &train_set, mode)?;
        println!(
            "{mode:<24} rs {rs:.4} (train {train_rs:.4})  rel {:.4} -> {:.4}  box {:.5} -> {:.5}  last-epoch rel {:.4}  {:.1}s",
            initial.rel_loss,
            fin.rel_loss,
            initial.box_loss,
            fin.box_loss,
            history.last().map_or(f64::NAN, |r| r.rel_loss),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
