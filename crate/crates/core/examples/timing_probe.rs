// temporary gradient-check probe
use ghclnet::backbone::{build_backbone, BackboneConfig, FreezePolicy};
use ghclnet::datamodel::ExpertKind;
use ghclnet::ingestion::ImageTensor;



use std::time::Instant;

fn main() {
    let cfg = BackboneConfig { input_size: 48, width_scale: 0.125, init_seed: 21, ..Default::default() };
    let mut model = build_backbone::<f64>(&cfg, ExpertKind::TexturedDetector).unwrap();
    model.apply_freeze(&FreezePolicy::all(&cfg)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let spec = ghclnet::ingestion::SynthSpec { n_per_class: 3, image_size: 64, noise_level: 0.05, seed: 5, n_sensors: 1 };
    let manifest = ghclnet::ingestion::synth_generate(&spec, dir.path()).unwrap();
    let batch: Vec<ImageTensor> = manifest.records.iter().take(8)
        .map(|r| ghclnet::ingestion::prepare_input_sized(&r.resolved_path, 48).unwrap()).collect();
    let targets = vec![0usize, 1, 0, 1, 0, 1, 0, 1];

    let t0 = Instant::now();
    let grads = model.gradients_on_batch(&batch, &targets).unwrap();
    println!("backward: {:.2}s", t0.elapsed().as_secs_f64());
    let samples = [
        ("block4a.conv1.weight", vec![5usize, 20, 0, 0]),
        ("block4a.down.conv.weight", vec![11usize, 9, 0, 0]),
        ("block4b.conv2.weight", vec![7usize, 30, 1, 2]),
        ("block4c.conv3.weight", vec![100usize, 12, 0, 0]),
        ("block4d.bn3.gamma", vec![60usize]),
        ("block4e.bn2.beta", vec![22usize]),
        ("block4f.conv3.weight", vec![20usize, 15, 0, 0]),
        ("block5a.conv2.weight", vec![17usize, 23, 2, 0]),
        ("block5a.bn1.gamma", vec![33usize]),
        ("block5b.conv1.weight", vec![14usize, 100, 0, 0]),
        ("block5c.conv3.weight", vec![200usize, 41, 0, 0]),
        ("block5c.bn3.gamma", vec![50usize]),
        ("head.fc.weight", vec![1usize, 30]),
        ("head.fc.bias", vec![0usize]),
        ("block1.conv.weight", vec![0usize, 0, 3, 3]),
        ("block2a.conv2.weight", vec![2usize, 1, 1, 1]),
        ("block3b.conv1.weight", vec![3usize, 10, 0, 0]),
    ];
    let t0 = Instant::now();
    for (name, idx) in samples {
        let analytic = grads[name][ndarray::IxDyn(&idx)];
        print!("{name:<28} analytic {analytic:+.4e} ");
        for h in [1e-4f64, 1e-5, 1e-6, 1e-7] {
            let mut loss_at = |delta: f64| -> f64 {
                model.modify_param(name, |mut v| v[ndarray::IxDyn(&idx)] += delta);
                let l = model.loss_on_batch(&batch, &targets).unwrap();
                model.modify_param(name, |mut v| v[ndarray::IxDyn(&idx)] -= delta);
                l
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
            print!(" h{h:.0e}:{rel:.1e}");
        }
        println!();
    }
    println!("fd loop: {:.2}s", t0.elapsed().as_secs_f64());
}
