use aod::aodnet::{init_params, ParamGroup};
use aod::data::{generate_dataset, AnnotatedImage, SceneConfig};
use aod::diffcore::Checkpoint;
use aod::trainer::{
    assign_labels, build_minibatch, build_pools, train, train_step, Label, StepOptions, TrainConfig, TrainOptions,
    TrainState,
};

fn scenes(n: usize, seed: u64) -> Vec<AnnotatedImage> {
    let cfg = SceneConfig {
        context_cue: true,
        seed,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, n).unwrap().images
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.fg_per_image = 6;
    cfg.bg_per_image = 10;
    cfg.iterations = 6;
    cfg.seed = 21;
    cfg
}

#[test]
fn zero_return_scale_follows_the_supervised_only_trajectory() {
    let images = scenes(6, 1);
    let pools = build_pools(&images).unwrap();
    let mut cfg = small_config();
    cfg.rl.return_scale = 0.0;
    let mut with_rl = TrainState::<f32>::new(&cfg).unwrap();
    let mut without = with_rl.clone();
    for it in 0..4 {
        let batch = build_minibatch(&pools, &cfg, cfg.seed, it).unwrap();
        let (m, _) = train_step(&mut with_rl, &images, &batch, &cfg, StepOptions::default()).unwrap();
        let skip = StepOptions {
            skip_reinforce: true,
            ..StepOptions::default()
        };
        let (n, _) = train_step(&mut without, &images, &batch, &cfg, skip).unwrap();
        assert!(m.episodes > 0);
        assert_eq!(n.episodes, 0);
        assert_eq!(m.supervised_loss, n.supervised_loss);
        assert_eq!(with_rl.params, without.params, "step {it}");
    }
}

#[test]
fn resume_from_saved_checkpoint_is_bit_exact() {
    let images = scenes(6, 3);
    let mut cfg = small_config();
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        ..TrainOptions::default()
    };
    let a = train::<f32>(&images, &cfg, &opts).unwrap();
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();

    let ck = Checkpoint::load(&aod::trainer::checkpoint_path(&out, 4)).unwrap();
    assert_eq!(ck.iteration, 4);
    let again = TrainOptions {
        resume: Some(ck),
        ..opts
    };
    let b = train::<f32>(&images, &cfg, &again).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let images = scenes(2, 4);
    let mut cfg = small_config();
    cfg.iterations = 0;
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train::<f32>(&images, &cfg, &opts).unwrap();
    let ck = Checkpoint::load(&dir.path().join("final.json")).unwrap();
    let (_, params) = aod::trainer::load_network::<f32>(&ck).unwrap();
    assert_eq!(params, init_params::<f32>(&cfg.aod, cfg.seed).unwrap());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn background_only_batches_leave_the_regressor_untouched() {
    let images = scenes(4, 5);
    let pools = build_pools(&images).unwrap();
    let batch: Vec<_> = pools.iter().flat_map(|p| p.bg.iter().take(8).copied()).collect();
    assert!(!batch.is_empty());
    for include_background in [false, true] {
        let mut cfg = small_config();
        cfg.rl.include_background = include_background;
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let names: Vec<String> = state.params.all().iter().map(|p| p.name.clone()).collect();
        let opts = StepOptions {
            instrument: true,
            ..StepOptions::default()
        };
        let (m, sources) = train_step(&mut state, &images, &batch, &cfg, opts).unwrap();
        assert_eq!(m.episodes > 0, include_background);
        let s = sources.unwrap();
        for (name, (sup, rl)) in names.iter().zip(s.supervised.buffers().iter().zip(s.reinforce.buffers())) {
            if ParamGroup::of(name) == ParamGroup::Regressor {
                assert!(sup.iter().chain(rl.iter()).all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn labels_partition_every_proposal() {
    for img in scenes(20, 6) {
        let samples = assign_labels(0, &img.proposals, &img.gts).unwrap();
        assert_eq!(samples.len(), img.proposals.len());
        for s in samples {
            let best = img
                .gts
                .iter()
                .map(|g| aod::geometry::iou(&s.proposal, &g.bbox))
                .fold(0.0, f64::max);
            match s.label {
                Label::Foreground(_) => assert!(best >= 0.5 && s.bbox_target.is_some()),
                Label::Background => assert!((0.1..0.5).contains(&best) && s.bbox_target.is_none()),
                Label::Ignored => assert!(best < 0.1),
            }
        }
    }
}

#[test]
fn training_is_independent_of_the_worker_count() {
    let images = scenes(6, 7);
    let cfg = small_config();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train::<f32>(&images, &cfg, &TrainOptions::default()).unwrap())
    };
    assert_eq!(run(1), run(3));
}
