// temporary reduced-scale rehearsal of the training criteria
use poselift::harness::{evaluate, generate, train, zero_depth_baseline, Model, Precision, RunConfig};
use poselift::skeleton::SynthConfig;

fn arm(name: &str, mutate: impl Fn(&mut RunConfig)) {
    let mut cfg = RunConfig::default();
    cfg.precision = Precision::F32;
    cfg.seed = 7;
    cfg.train_sequences = 100;
    cfg.test_sequences = 30;
    cfg.epochs = 10;
    mutate(&mut cfg);
    let synth = SynthConfig { frames: cfg.backbone.frames, amplitude: cfg.amplitude, ..Default::default() };
    let train_set = generate(cfg.train_sequences, &synth, cfg.seed, "train").unwrap();
    let test_set = generate(cfg.test_sequences, &synth, cfg.seed, "test").unwrap();
    let baseline = zero_depth_baseline(&test_set, &synth.camera).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &train_set, dir.path()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let model = Model::<f32>::load(&out.checkpoint_path).unwrap();
    let rep = evaluate(&model, &test_set, 1, cfg.seed).unwrap();
    println!(
        "{:<12} baseline {:6.1}mm | model {:6.1}mm ({:+5.0}% below) | loss {:.3}->{:.3} | {:.0}s",
        name, baseline.mpjpe, rep.mpjpe,
        100.0 * (1.0 - rep.mpjpe / baseline.mpjpe),
        out.epoch_losses[0], out.epoch_losses.last().unwrap(), secs
    );
}

#[test]
#[ignore]
fn rehearsal() {
    // divergence diagnosis: medium scale, per-epoch losses printed
    let mut cfg = RunConfig::default();
    cfg.precision = Precision::F32;
    cfg.seed = 7;
    cfg.batch_size = 4;
    cfg.lr = 2e-3;
        let synth = SynthConfig { frames: cfg.backbone.frames, amplitude: cfg.amplitude, ..Default::default() };
    let train_set = generate(cfg.train_sequences, &synth, cfg.seed, "train").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &train_set, dir.path()).unwrap();
    println!("losses {:?} in {:.0}s", out.epoch_losses.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), t0.elapsed().as_secs_f64());
    panic!("done");
}
