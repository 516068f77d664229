use std::sync::{Arc, OnceLock};

use intseg::cascade::{interactive_step, Pipeline, Segmenter, SessionState, Strategy, ZoomConfig};
use intseg::clicks::{simulate_next_click, Click, ClickSet};
use intseg::config::AppConfig;
use intseg::data_io::{build_dataset, generate_scene, generate_split, load_split, LabeledImage, SceneConfig, ShapeKind, Split, MANIFEST_FILE};
use intseg::evalbench::{evaluate, iou, noc, nof, records_csv, summarize, EvalConfig, EvalItem};
use intseg::mask::{BinMask, ProbMask};
use intseg::model::{FpmVariant, Model, ModelConfig};
use intseg::tensor::Tensor;
use intseg::training::{train_coarse, train_fine, TrainConfig};
use intseg::Error;

fn small_scenes() -> SceneConfig {
    SceneConfig {
        height: 64,
        width: 96,
        ..SceneConfig::default()
    }
}

fn labeled(master: u64, split: Split, n: usize) -> Vec<LabeledImage> {
    generate_split(master, split, n, &small_scenes())
        .unwrap()
        .into_iter()
        .enumerate()
        .map(Into::into)
        .collect()
}

fn items(data: &[LabeledImage]) -> Vec<EvalItem<'_>> {
    data.iter()
        .map(|s| EvalItem {
            id: &s.id,
            image: &s.image,
            gt: &s.gt,
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs_coarse: 30,
        epochs_fine: 2,
        lr_coarse: 3e-3,
        lr_fine: 3e-4,
        batch_size: 4,
        max_sim_clicks: 2,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        low_channels: 4,
        high_channels: 8,
        fpm: FpmVariant::SgmHsgm,
        ..ModelConfig::default()
    };
    cfg.zoom = ZoomConfig {
        target_h: 64,
        target_w: 96,
        ..ZoomConfig::default()
    };
    cfg
}

/// Coarse model trained once on a small disk-only set and shared by the tests.
fn toy_model() -> Arc<Model> {
    static MODEL: OnceLock<Arc<Model>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let train: Vec<LabeledImage> = (0..40)
                .map(|i| (i, generate_scene(1000 + i as u64, &small_scenes(), Some(ShapeKind::Disk)).unwrap()).into())
                .collect();
            Arc::new(train_coarse(&train, &toy_config()).unwrap().model)
        })
        .clone()
}

struct Oracle(BinMask);

impl Segmenter for Oracle {
    fn predict(&self, _: &Tensor, _: &ProbMask, clicks: &[Click]) -> intseg::Result<ProbMask> {
        Ok(if clicks.is_empty() {
            ProbMask::zeros(self.0.height(), self.0.width())
        } else {
            self.0.to_prob()
        })
    }
}

#[test]
fn oracle_stub_needs_one_click_everywhere() {
    let data = labeled(5, Split::Eval, 6);
    let cfg = EvalConfig::default();
    for s in &data {
        let p = Pipeline::coarse_only(Arc::new(Oracle(s.gt.clone())), ZoomConfig::default());
        let recs = evaluate(&p, &items(std::slice::from_ref(s)), &cfg).unwrap();
        assert_eq!(recs[0].clicks_used, 1);
        assert!(recs[0].success);
        assert_eq!(noc(&recs, &cfg).unwrap(), 1.0);
        assert_eq!(nof(&recs).unwrap(), 0);
    }
}

#[test]
fn one_positive_click_beats_the_empty_start() {
    let model = toy_model();
    let pipeline = Pipeline::coarse_only(model, ZoomConfig::default());
    let held_out: Vec<_> = (0..20)
        .map(|i| generate_scene(9000 + i, &small_scenes(), Some(ShapeKind::Disk)).unwrap())
        .collect();
    let improved = held_out
        .iter()
        .filter(|s| {
            let mut session = SessionState::new(s.image.clone()).unwrap();
            let before = iou(&session.prev_prob.binarize(0.5), &s.gt).unwrap();
            let click = simulate_next_click(&session.prev_prob.binarize(0.5), &s.gt, &ClickSet::new()).unwrap();
            let out = interactive_step(&mut session, click, &pipeline).unwrap();
            iou(&out.prob.binarize(0.5), &s.gt).unwrap() > before
        })
        .count();
    assert!(improved >= 18, "only {improved}/20 scenes improved");
}

#[test]
fn evaluation_is_reproducible() {
    let model = toy_model();
    let eval = labeled(6, Split::Eval, 12);
    let cfg = EvalConfig {
        max_clicks: 8,
        ..EvalConfig::default()
    };
    let p = Pipeline::coarse_only(model, ZoomConfig::default());
    let a = evaluate(&p, &items(&eval), &cfg).unwrap();
    let b = evaluate(&p, &items(&eval), &cfg).unwrap();
    assert_eq!(noc(&a, &cfg).unwrap(), noc(&b, &cfg).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ious, y.ious);
    }
}

#[test]
fn cascade_trains_and_reports() {
    let coarse = toy_model();
    let train = labeled(7, Split::Train, 8);
    let cfg = toy_config();
    let fine = train_fine(&coarse, &train, &cfg).unwrap();
    assert_eq!(fine.log.len(), 2 * 2);
    assert!(fine.log.iter().all(|l| l.loss.is_finite()));
    let p = Pipeline::cascade(coarse, Arc::new(fine.model), Strategy::CoarseToFine, cfg.zoom);
    let eval = labeled(7, Split::Eval, 4);
    let ecfg = EvalConfig {
        max_clicks: 4,
        ..EvalConfig::default()
    };
    let recs = evaluate(&p, &items(&eval), &ecfg).unwrap();
    let summary = summarize(&recs, &ecfg).unwrap();
    assert_eq!(summary.curve.len(), 4);
    assert!(summary.noc >= 1.0 && summary.noc <= 4.0);
    let csv = records_csv(&recs);
    assert!(csv.starts_with("sample,clicks,success,final_iou,ms_per_click"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn session_rejects_duplicates_without_changing_state() {
    let scene = generate_scene(3, &small_scenes(), None).unwrap();
    let model = Arc::new(Model::init(toy_config().model, 1));
    let p = Pipeline::coarse_only(model, ZoomConfig::default());
    let mut session = SessionState::new(scene.image).unwrap();
    interactive_step(&mut session, Click::positive(10, 10), &p).unwrap();
    let before = session.clone();
    let dup = interactive_step(&mut session, Click::negative(10, 10), &p);
    assert!(matches!(dup, Err(Error::DuplicateClick { row: 10, col: 10 })));
    let oob = interactive_step(&mut session, Click::positive(64, 0), &p);
    assert!(matches!(oob, Err(Error::OutOfBounds { .. })));
    assert_eq!(session, before);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(3, 2, 11, dir.path(), &small_scenes()).unwrap();
    assert_eq!(manifest.entries.len(), 5);
    let loaded = load_split(&dir.path().join(MANIFEST_FILE), Split::Eval).unwrap();
    let fresh = generate_split(11, Split::Eval, 2, &small_scenes()).unwrap();
    for (l, f) in loaded.iter().zip(&fresh) {
        assert_eq!(l.gt, f.gt);
        let err = l.image.max_abs_diff(&f.image);
        assert!(err <= 0.5 / 255.0 + 1e-12, "8-bit quantisation error {err}");
    }
}

#[test]
fn config_overrides_apply_and_validate() {
    let text = "[train]\nepochs_coarse = 3\n\n[zoom]\ntarget_h = 48\n";
    let cfg = AppConfig::from_toml(text, &["train.batch_size=2".into(), "eval.tau=0.9".into()]).unwrap();
    assert_eq!(cfg.train.epochs_coarse, 3);
    assert_eq!(cfg.train.batch_size, 2);
    assert_eq!(cfg.eval.tau, 0.9);
    assert_eq!(cfg.train_config().zoom.target_h, 48);
    assert!(AppConfig::from_toml("[zoom]\ntarget_h = 50\n", &[]).is_err());
    assert!(AppConfig::from_toml("[train]\nno_such_key = 1\n", &[]).is_err());
    let again = AppConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(again.hash(), cfg.hash());
}
