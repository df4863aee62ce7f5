//! Trains on a small synthetic set and reports the training-set F-score as it goes.
//! Arguments are `key=value` config overrides; `heldout=N` also scores N unseen sequences.

use std::time::Instant;

use lane3d::config::RunConfig;
use lane3d::runner::{evaluate, load_data};
use lane3d::synth::generate_sequence;
use lane3d::train::Trainer;

fn main() -> lane3d::Result<()> {
    let (heldout, overrides): (Vec<String>, Vec<String>) =
        std::env::args().skip(1).partition(|a| a.starts_with("heldout="));
    let heldout: u64 = heldout
        .first()
        .map_or(0, |a| a["heldout=".len()..].parse().expect("heldout=N"));
    let cfg = RunConfig::from_toml_str("train.max_steps = 2000\n", &overrides)?;
    let eval_every = 250;
    let data = load_data(&cfg)?;
    let unseen = (0..heldout)
        .map(|s| generate_sequence(&cfg.data.scene, 10_000 + s, cfg.data.frames))
        .collect::<lane3d::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(cfg, data)?;
    let start = Instant::now();
    while trainer.step < trainer.total_steps() {
        let log = trainer.train_step()?;
        if log.step % 50 == 0 {
            println!(
                "step {} loss {:.3} curve {:.3} query {:.3} seg {:.3} |g| {:.2} {:.0}s",
                log.step,
                log.total_loss,
                log.l_curve,
                log.l_query,
                log.l_seg,
                log.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
        if log.step % eval_every == 0 || log.step == trainer.total_steps() {
            let eval_cfg = trainer.cfg.eval_config();
            let (s, _) = evaluate(
                &trainer.model,
                &trainer.store,
                trainer.data(),
                &trainer.cfg.fusion,
                &eval_cfg,
            )?;
            let o = &s.openlane;
            println!(
                "eval step {} F1 {:.4} P {:.3} R {:.3} x {:.3}/{:.3} z {:.3}/{:.3}",
                log.step, o.f1, o.precision, o.recall, o.x_err_near, o.x_err_far, o.z_err_near, o.z_err_far
            );
            if !unseen.is_empty() {
                let (s, _) = evaluate(&trainer.model, &trainer.store, &unseen, &trainer.cfg.fusion, &eval_cfg)?;
                let o = &s.openlane;
                println!(
                    "heldout step {} F1 {:.4} P {:.3} R {:.3}",
                    log.step, o.f1, o.precision, o.recall
                );
            }
        }
    }
    Ok(())
}
