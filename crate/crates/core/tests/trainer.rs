use adverseg_core::networks::{DiscriminatorConfig, Network, RNetConfig};
use adverseg_core::objectives::{GanForm, LossWeights};
use adverseg_core::phantom::{generate_domain, DatasetConfig, DomainRole, Subject};
use adverseg_core::tensor::{AdamConfig, AdamState, Labels};
use adverseg_core::trainer::{
    discriminator_step, generator_step, segment, train_supervised, Checkpoint, Fakes, LabeledSlice,
    Models, SupervisedData, SusanData, SusanModels, TrainConfig, TrainData, TrainState, Trainer,
};
use adverseg_core::{Error, Tensor4};

fn subjects() -> (Vec<Subject>, Vec<Subject>) {
    let dc = DatasetConfig {
        slices_per_subject: 2,
        reference_subjects: 4,
        target_subjects: 4,
        ..DatasetConfig::default()
    };
    (
        generate_domain(&dc, DomainRole::Reference, 3).unwrap(),
        generate_domain(&dc, DomainRole::Target, 3).unwrap(),
    )
}

fn config(base: usize) -> TrainConfig {
    TrainConfig {
        seed: 5,
        epochs: 2,
        rnet: RNetConfig {
            depth: 2,
            base_channels: base,
            ..RNetConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: base,
            ..DiscriminatorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn susan_data(r: &[Subject], t: &[Subject]) -> SusanData<f32> {
    let refs: Vec<&Subject> = r.iter().collect();
    let tgts: Vec<&Subject> = t.iter().collect();
    SusanData::new(&refs[..3], &refs[3..], &tgts[..3], &tgts[3..]).unwrap()
}

fn batch(slices: &[LabeledSlice<f32>]) -> (Tensor4<f32>, Labels) {
    let imgs: Vec<&Tensor4<f32>> = slices.iter().map(|s| &s.image).collect();
    let values: Vec<u8> = slices.iter().flat_map(|s| s.labels.values.iter().copied()).collect();
    let l = &slices[0].labels;
    (
        Tensor4::stack(&imgs).unwrap(),
        Labels::new(slices.len(), l.h, l.w, values, false).unwrap(),
    )
}

fn susan_models(state: TrainState<f32>) -> (SusanModels<f32>, adverseg_core::trainer::SusanOptimizers<f32>) {
    match (state.models, state.optimizers) {
        (Models::Susan(m), adverseg_core::trainer::Optimizers::Susan(o)) => (m, o),
        _ => unreachable!(),
    }
}

fn params<N: Network<f32>>(n: &N) -> Vec<Vec<f32>> {
    n.params().tensors.iter().map(|t| t.data().to_vec()).collect()
}

fn all_params(m: &Models<f32>) -> Vec<Vec<f32>> {
    m.named()
        .into_iter()
        .flat_map(|(_, p)| p.tensors.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_weights_leave_generators_unchanged() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let (mut m, mut o) = susan_models(TrainState::fresh(&config(4)).unwrap());
    let (x, masks) = batch(&data.reference_train[..3]);
    let y = Tensor4::stack(&data.target_train[..3].iter().collect::<Vec<_>>()).unwrap();
    let (f0, b0) = (params(&m.f), params(&m.b));
    let w = LossWeights {
        cyc: 0.0,
        gan: 0.0,
        seg: 0.0,
    };
    let (report, _) = generator_step(&mut m, &mut o, &x, &masks, &y, &w, GanForm::NonSaturating).unwrap();
    assert_eq!(report.total, 0.0);
    assert_eq!(params(&m.f), f0);
    assert_eq!(params(&m.b), b0);
}

#[test]
fn cycle_only_training_halves_the_cycle_loss() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let (mut m, mut o) = susan_models(TrainState::fresh(&config(4)).unwrap());
    let (x, masks) = batch(&data.reference_train[..3]);
    let y = Tensor4::stack(&data.target_train[..3].iter().collect::<Vec<_>>()).unwrap();
    let w = LossWeights {
        cyc: 1.0,
        gan: 0.0,
        seg: 0.0,
    };
    let mut first = None;
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let (rep, _) = generator_step(&mut m, &mut o, &x, &masks, &y, &w, GanForm::NonSaturating).unwrap();
        first.get_or_insert(rep.cycle);
        last = rep.cycle;
        if step >= 20 && last <= 0.5 * first.unwrap() {
            break;
        }
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "cycle loss {first} -> {last}");
}

#[test]
fn ten_steps_are_bitwise_reproducible() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let run = || {
        let mut tr = Trainer::new(config(4), TrainData::Susan(&data)).unwrap();
        let losses: Vec<u64> = (0..10).map(|_| tr.step().unwrap().report.total.to_bits()).collect();
        (losses, all_params(&tr.state.models))
    };
    assert!(run() == run());
}

/// Discriminators whose head outputs zero logits, i.e. probability 0.5.
fn at_half(m: &mut SusanModels<f32>) {
    for d in [&mut m.d_x, &mut m.d_y] {
        let p = d.params_mut();
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.starts_with("head.") {
                t.data_mut().fill(0.0);
            }
        }
    }
}

#[test]
fn discriminator_at_the_fixed_point_stays_put() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let cfg = config(4);
    let (mut m, mut o) = susan_models(TrainState::fresh(&cfg).unwrap());
    at_half(&mut m);
    let (x, _) = batch(&data.reference_train[..3]);
    let y = Tensor4::stack(&data.target_train[..3].iter().collect::<Vec<_>>()).unwrap();
    // Fakes drawn from exactly the real batches.
    let fakes = Fakes {
        fx: y.clone(),
        by: x.clone(),
    };
    let (dx0, dy0) = (params(&m.d_x), params(&m.d_y));
    let (ox, oy) = discriminator_step(&mut m, &mut o, &x, &y, &fakes, GanForm::NonSaturating).unwrap();
    assert!((ox - 2.0 * 0.5f64.ln()).abs() < 1e-5 && (oy - ox).abs() < 1e-5);
    let bound = 1e-3 * cfg.lr;
    for (before, after) in [(dx0, params(&m.d_x)), (dy0, params(&m.d_y))] {
        for (a, b) in before.iter().flatten().zip(after.iter().flatten()) {
            assert!(f64::from((a - b).abs()) < bound);
        }
    }
}

#[test]
fn discriminator_ascends_and_leaves_generators_alone() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let (mut m, mut o) = susan_models(TrainState::fresh(&config(4)).unwrap());
    let (x, masks) = batch(&data.reference_train[..3]);
    let y = Tensor4::stack(&data.target_train[..3].iter().collect::<Vec<_>>()).unwrap();
    let frozen = LossWeights {
        cyc: 0.0,
        gan: 0.0,
        seg: 0.0,
    };
    let (_, fakes) = generator_step(&mut m, &mut o, &x, &masks, &y, &frozen, GanForm::NonSaturating).unwrap();
    let (f0, b0) = (params(&m.f), params(&m.b));
    let mut objective = Vec::new();
    for _ in 0..101 {
        let (ox, oy) = discriminator_step(&mut m, &mut o, &x, &y, &fakes, GanForm::NonSaturating).unwrap();
        objective.push(ox + oy);
    }
    let rising = objective.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rising >= 90, "{rising} of 100 steps increased the objective");
    assert_eq!(params(&m.f), f0);
    assert_eq!(params(&m.b), b0);
}

#[test]
fn target_masks_in_the_generator_objective_are_rejected() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let (mut m, mut o) = susan_models(TrainState::fresh(&config(4)).unwrap());
    let (x, masks) = batch(&data.reference_train[..3]);
    let leaked = Labels::new(masks.n, masks.h, masks.w, masks.values.to_vec(), true).unwrap();
    let y = Tensor4::stack(&data.target_train[..3].iter().collect::<Vec<_>>()).unwrap();
    let err = generator_step(&mut m, &mut o, &x, &leaked, &y, &LossWeights::default(), GanForm::NonSaturating);
    assert!(matches!(err, Err(Error::MaskLeakage(_))));

    let tgts: Vec<&Subject> = t.iter().collect();
    let err = SusanData::<f32>::new(&tgts[..2], &tgts[2..3], &tgts[..2], &tgts[2..3]);
    assert!(matches!(err, Err(Error::MaskLeakage(_))));
}

#[test]
fn history_has_one_row_per_iteration() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let out = Trainer::new(config(4), TrainData::Susan(&data)).unwrap().run().unwrap();
    // 6 training slices in batches of 3 over 2 epochs.
    let ids: Vec<u64> = out.history.iter().map(|h| h.iteration).collect();
    assert_eq!(ids, vec![1, 2, 3, 4]);
    let val_epochs: Vec<usize> = out.validations.iter().map(|v| v.epoch).collect();
    assert_eq!(val_epochs, vec![0, 1, 2]);
    let min = out.validations.iter().map(|v| v.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val, min);
    assert!(out.best_val <= out.validations[0].loss);
}

#[test]
fn checkpoint_round_trip_and_resume_are_exact() {
    let (r, t) = subjects();
    let data = susan_data(&r, &t);
    let mut cfg = config(4);
    cfg.epochs = 4;
    let mut straight = Trainer::new(cfg.clone(), TrainData::Susan(&data)).unwrap();
    for _ in 0..3 {
        straight.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.susn");
    Checkpoint::save(&path, &straight.state, "abc").unwrap();
    let (state, hash) = Checkpoint::load::<f32>(&path, &cfg).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(all_params(&state.models), all_params(&straight.state.models));

    let probe = Tensor4::stack(&data.target_val.iter().collect::<Vec<_>>()).unwrap();
    let (a, b) = (straight.state.models.target_segmenter(), state.models.target_segmenter());
    assert_eq!(a.infer(&probe).unwrap().1.data(), b.infer(&probe).unwrap().1.data());

    let mut resumed = Trainer::resume(cfg, TrainData::Susan(&data), state).unwrap();
    for _ in 0..5 {
        let (x, y) = (straight.step().unwrap(), resumed.step().unwrap());
        assert_eq!(x.iteration, y.iteration);
        assert_eq!(x.report.total.to_bits(), y.report.total.to_bits());
        assert_eq!(x.disc_x.to_bits(), y.disc_x.to_bits());
        assert_eq!(x.disc_y.to_bits(), y.disc_y.to_bits());
    }
}

fn bone_dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        both += usize::from(a == class && b == class);
        p += usize::from(a == class);
        t += usize::from(b == class);
    }
    2.0 * both as f64 / (p + t) as f64
}

#[test]
fn baseline_fits_its_training_bones() {
    let (_, t) = subjects();
    let tgts: Vec<&Subject> = t.iter().collect();
    let data = SupervisedData {
        train: adverseg_core::trainer::labeled_slices::<f32>(&tgts[..3]),
        val: adverseg_core::trainer::labeled_slices::<f32>(&tgts[3..]),
    };
    let mut cfg = config(8);
    cfg.epochs = 250;
    cfg.validate_every = 50;
    let out = train_supervised(&cfg, &data).unwrap();
    assert!(out.history.iter().all(|h| h.report.cycle == 0.0
        && h.report.gan_forward == 0.0
        && h.report.gan_backward == 0.0
        && h.report.seg == h.report.total));
    let net = out.state.models.target_segmenter();
    let (x, masks) = batch(&data.train);
    let pred = segment(net, &x).unwrap();
    for class in [1, 3] {
        let d = bone_dice(&pred, &masks.values, class);
        assert!(d >= 0.95, "class {class} training Dice {d}");
    }
    cfg.epochs = 3;
    let a = train_supervised(&cfg, &data).unwrap();
    let b = train_supervised(&cfg, &data).unwrap();
    assert!(all_params(&a.best) == all_params(&b.best));
}

#[test]
fn adam_with_zero_gradients_is_a_no_op() {
    let p = vec![Tensor4::<f32>::filled(adverseg_core::Shape::new(1, 2, 2, 2), 0.3)];
    let mut params = p.clone();
    let mut opt = AdamState::new(AdamConfig::default(), &params);
    opt.step(&mut params, &[Tensor4::zeros(p[0].shape())]).unwrap();
    assert_eq!(params[0].data(), p[0].data());
}
