//! Two-phase training: losses, condition dropout, the optimizer and the
//! checkpointing driver.

mod config;
mod driver;
mod losses;
mod optim;

pub use config::{LrKind, TrainConfig};
pub use driver::{csv_header, csv_row, train, Trainer, LOSS_CSV, STATE_FILE, TRAIN_CONFIG_FILE};
pub use losses::{
    condition_dropout, contrastive_term, mean_squared_error, offset_loss, perceptual_loss, step_losses,
    ContrastTargets, LossReport, LossWeights, StepLosses, StepOutputs,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphset::{render_synthetic, SplitSpec, SyntheticConfig};
    use crate::network::ModelConfig;
    use crate::schedule::ScheduleConfig;
    use crate::scr::{ScrConfig, StyleExtractor};
    use candle_core::DType;
    use std::path::Path;

    fn small_scr(dir: &Path) {
        let cfg = ScrConfig {
            stage_widths: vec![8, 8, 16, 16],
            convs_per_stage: 1,
            proj_dim: 16,
        };
        StyleExtractor::new(cfg, DType::F32, 5).unwrap().save(dir).unwrap();
    }

    fn config(phase: u8, scr: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::defaults_for(phase).unwrap();
        cfg.model = ModelConfig::tiny();
        cfg.schedule = ScheduleConfig { timesteps: 50, ..Default::default() };
        cfg.steps = 4;
        cfg.batch = 2;
        cfg.seed = 11;
        cfg.lr = 1e-3;
        cfg.lr_kind = LrKind::LinearDecay;
        cfg.scr_checkpoint = Some(scr.to_path_buf());
        cfg
    }

    #[test]
    fn csv_rows_and_resume_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scr = dir.path().join("scr");
        small_scr(&scr);
        let corpus = render_synthetic(&SyntheticConfig { n_fonts: 3, n_chars: 4, resolution: 32, seed: 2 }).unwrap();
        let split = SplitSpec::training_only(&corpus);
        let cfg = config(1, &scr);
        let full = dir.path().join("full");
        train(&cfg, &corpus, &split, &full, None, |_, _| {}).unwrap();
        let csv = std::fs::read_to_string(full.join(LOSS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), cfg.steps + 1);
        assert_eq!(csv.lines().next().unwrap(), "step,total,mse,cp,offset");

        let mid = dir.path().join("mid");
        std::fs::create_dir_all(&mid).unwrap();
        // A step-2 checkpoint of the same 4-step run.
        let mut t = Trainer::new(cfg.clone(), &corpus, &split).unwrap();
        let mut rows = vec![csv_header(1).to_string()];
        for s in 0..2 {
            rows.push(csv_row(s, &t.train_step().unwrap()));
        }
        t.save(&mid).unwrap();
        std::fs::write(mid.join(LOSS_CSV), rows.join("\n") + "\n").unwrap();
        let resumed = dir.path().join("resumed");
        train(&cfg, &corpus, &split, &resumed, Some(&mid), |_, _| {}).unwrap();
        for f in [LOSS_CSV, "params.bin", "optimizer.bin", STATE_FILE] {
            assert_eq!(
                std::fs::read(full.join(f)).unwrap(),
                std::fs::read(resumed.join(f)).unwrap(),
                "{f} differs after resume"
            );
        }
        let mut wrong = cfg.clone();
        wrong.seed = 12;
        assert!(matches!(Trainer::resume(wrong, &corpus, &split, &mid), Err(crate::Error::Checkpoint { .. })));
    }

    #[test]
    fn zero_weight_phase_two_matches_phase_one() {
        let dir = tempfile::tempdir().unwrap();
        let scr = dir.path().join("scr");
        small_scr(&scr);
        let corpus = render_synthetic(&SyntheticConfig { n_fonts: 4, n_chars: 4, resolution: 32, seed: 2 }).unwrap();
        let split = SplitSpec::training_only(&corpus);
        let p1 = config(1, &scr);
        let mut p2 = TrainConfig { phase: 2, negatives: 16, lambda_sc: 0.0, ..p1.clone() };
        let mut a = Trainer::new(p1, &corpus, &split).unwrap();
        let mut b = Trainer::new(p2.clone(), &corpus, &split).unwrap();
        assert_eq!(b.negatives(), 3);
        for _ in 0..3 {
            let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
            assert_eq!((ra.total, ra.mse, ra.cp, ra.offset), (rb.total, rb.mse, rb.cp, rb.offset));
            assert!(ra.sc.is_none() && rb.sc.unwrap().is_finite());
        }

        p2.lambda_sc = 0.5;
        let c = Trainer::new(p2, &corpus, &split).unwrap();
        let (total, report) = c.evaluate(0).unwrap();
        assert!(report.sc.unwrap() > 0.0);
        let grads = total.backward().unwrap();
        let live = c
            .model()
            .store()
            .vars()
            .iter()
            .filter(|(_, v)| grads.get(v).map_or(false, |g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0))
            .count();
        assert!(live > 0);
    }
}
