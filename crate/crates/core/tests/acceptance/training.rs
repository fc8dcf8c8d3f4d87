use std::sync::OnceLock;

use splatsr::io::encode_checkpoint;
use splatsr::model::Model;
use splatsr::synth::PseudoMode;
use splatsr::train::{evaluate, log_to_csv, train_coarse, train_fine, TrainConfig, TrainEvent};
use splatsr::{synth, SceneDataset, SynthSceneSpec};

use crate::{check, Outcome};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Desk-scale fine stage: 500 iterations with growth every 100, then 200
/// more after the refinement round.
fn fine_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        fine_iters: 500,
        refine_phase_iters: 200,
        ..base.clone()
    }
}

fn hr_test_psnr(model: &Model, ds: &SceneDataset, cfg: &TrainConfig) -> Result<f64, String> {
    Ok(evaluate(model, ds, &ds.test, &ds.hr_gt, true, &cfg.render).map_err(err)?.psnr)
}

struct Coarse {
    dataset: SceneDataset,
    model: Model,
    train_psnr: f64,
    test_psnr: f64,
}

/// The default 50-Gaussian scene trained with the default coarse settings;
/// shared by the convergence and fine-stage criteria.
fn default_coarse() -> &'static Result<Coarse, String> {
    static CELL: OnceLock<Result<Coarse, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = synth(&SynthSceneSpec::default()).map_err(err)?.dataset;
        let cfg = TrainConfig::default();
        let model = train_coarse(&dataset, &cfg).map_err(err)?.checkpoint.model;
        let train_psnr = evaluate(&model, &dataset, &dataset.train, &dataset.lr_images, false, &cfg.render).map_err(err)?.psnr;
        let test_psnr = evaluate(&model, &dataset, &dataset.test, &dataset.lr_images, false, &cfg.render).map_err(err)?.psnr;
        Ok(Coarse {
            dataset,
            model,
            train_psnr,
            test_psnr,
        })
    })
}

pub fn coarse_convergence() -> Outcome {
    let cfg = TrainConfig::default();
    let c = default_coarse().as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "{} iterations, {} anchors: train {:.2} dB, held-out {:.2} dB",
        cfg.coarse_iters,
        c.model.anchors.len(),
        c.train_psnr,
        c.test_psnr
    );
    check(cfg.coarse_iters <= 5000, || format!("{detail}; too many iterations"))?;
    check(c.train_psnr >= 30.0 && c.test_psnr >= 25.0, || format!("{detail}; need ≥ 30 / ≥ 25"))?;
    Ok(detail)
}

pub fn fine_efficacy() -> Outcome {
    let c = default_coarse().as_ref().map_err(Clone::clone)?;
    let base = TrainConfig::default();
    let cfg = fine_config(&base);
    let coarse_hr = hr_test_psnr(&c.model, &c.dataset, &cfg)?;
    let oracle = train_fine(&c.model, &c.dataset, &cfg).map_err(err)?;
    let oracle_hr = hr_test_psnr(&oracle.checkpoint.model, &c.dataset, &cfg)?;

    let bicubic = synth(&SynthSceneSpec {
        pseudo: PseudoMode::Bicubic,
        ..SynthSceneSpec::default()
    })
    .map_err(err)?
    .dataset;
    let weighted = train_fine(&c.model, &bicubic, &cfg).map_err(err)?;
    let unweighted_cfg = TrainConfig {
        uncertainty_weighting: false,
        ..cfg.clone()
    };
    let unweighted = train_fine(&c.model, &bicubic, &unweighted_cfg).map_err(err)?;
    let w_hr = hr_test_psnr(&weighted.checkpoint.model, &bicubic, &cfg)?;
    let u_hr = hr_test_psnr(&unweighted.checkpoint.model, &bicubic, &cfg)?;

    let detail = format!(
        "coarse@HR {coarse_hr:.2} → oracle fine {oracle_hr:.2} dB; bicubic weighted {w_hr:.2} vs unweighted {u_hr:.2} dB"
    );
    check(oracle_hr >= coarse_hr + 1.0, || format!("{detail}; oracle gain below 1 dB"))?;
    check(w_hr >= u_hr, || format!("{detail}; weighting lost"))?;
    Ok(detail)
}

pub fn densification_ablation() -> Outcome {
    // a scene whose initial points miss half the Gaussians, with anchors that
    // spawn only two Gaussians each, so missing geometry must be grown
    let spec = SynthSceneSpec {
        drop_fraction: 0.5,
        points_per_gaussian: 1,
        ..SynthSceneSpec::default()
    };
    let ds = synth(&spec).map_err(err)?.dataset;
    let mut base = TrainConfig {
        coarse_iters: 2000,
        ..TrainConfig::default()
    };
    base.model.k = 2;
    let coarse = train_coarse(&ds, &base).map_err(err)?.checkpoint.model;
    let cfg = fine_config(&base);
    let on = train_fine(&coarse, &ds, &cfg).map_err(err)?;
    let off = train_fine(
        &coarse,
        &ds,
        &TrainConfig {
            growth: false,
            ..cfg.clone()
        },
    )
    .map_err(err)?;
    let grown: usize = on
        .events
        .iter()
        .map(|e| match e {
            TrainEvent::Growth { added, .. } => *added,
            _ => 0,
        })
        .sum();
    let on_hr = hr_test_psnr(&on.checkpoint.model, &ds, &cfg)?;
    let off_hr = hr_test_psnr(&off.checkpoint.model, &ds, &cfg)?;
    let detail = format!(
        "{} → {} anchors ({grown} grown): with growth {on_hr:.2} dB, without {off_hr:.2} dB",
        coarse.anchors.len(),
        on.checkpoint.model.anchors.len()
    );
    check(on_hr >= off_hr + 0.3, || format!("{detail}; gain below 0.3 dB"))?;
    Ok(detail)
}

struct RunRecord {
    coarse: Vec<u8>,
    fine: Vec<u8>,
    logs: String,
    metrics: Vec<u64>,
}

fn small_pipeline() -> Result<RunRecord, String> {
    let spec = SynthSceneSpec {
        n_gaussians: 20,
        lr_width: 32,
        lr_height: 32,
        upscale_factor: 2,
        n_train_views: 4,
        n_test_views: 2,
        seed: 9,
        ..SynthSceneSpec::default()
    };
    let ds = synth(&spec).map_err(err)?.dataset;
    let cfg = TrainConfig {
        coarse_iters: 150,
        fine_iters: 60,
        refine_phase_iters: 30,
        growth_interval: 20,
        prune_window: 50,
        views_per_iter: 2,
        eval_interval: 50,
        seed: 17,
        ..TrainConfig::default()
    };
    let coarse = train_coarse(&ds, &cfg).map_err(err)?;
    let fine = train_fine(&coarse.checkpoint.model, &ds, &cfg).map_err(err)?;
    let lr = evaluate(&coarse.checkpoint.model, &ds, &ds.test, &ds.lr_images, false, &cfg.render).map_err(err)?;
    let hr = evaluate(&fine.checkpoint.model, &ds, &ds.test, &ds.hr_gt, true, &cfg.render).map_err(err)?;
    Ok(RunRecord {
        coarse: encode_checkpoint(&coarse.checkpoint).map_err(err)?,
        fine: encode_checkpoint(&fine.checkpoint).map_err(err)?,
        logs: format!("{}{}{:?}", log_to_csv(&coarse.log), log_to_csv(&fine.log), fine.events),
        metrics: [lr.psnr, lr.ssim, hr.psnr, hr.ssim].iter().map(|v| v.to_bits()).collect(),
    })
}

pub fn determinism() -> Outcome {
    let a = small_pipeline()?;
    // the second run uses a different worker count
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(err)?;
    let b = pool.install(small_pipeline)?;
    check(a.coarse == b.coarse, || "coarse checkpoints differ".into())?;
    check(a.fine == b.fine, || "fine checkpoints differ".into())?;
    check(a.logs == b.logs, || "training logs differ".into())?;
    check(a.metrics == b.metrics, || "evaluation metrics differ".into())?;
    Ok(format!(
        "coarse ({} B) and fine ({} B) checkpoints, logs and metrics bit-identical across runs (1 vs 3 workers)",
        a.coarse.len(),
        a.fine.len()
    ))
}
