//! Quick throughput probe: per-batch cost of train steps and eval
//! forwards on the tiny config.

use dfadapter_core::config::ModelConfig;
use dfadapter_core::graph::Mode;
use dfadapter_core::model::{ForwardOpts, Model};
use dfadapter_core::synth::{synth_dataset, ArtifactMode, SyntheticSpec};
use dfadapter_core::training::{sgd_step, SgdState, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f32>::build(&cfg, 1).unwrap();
    let data = synth_dataset(&SyntheticSpec {
        count: 32,
        image_size: 64,
        artifact_mode: ArtifactMode::Both,
        blend_sigma: 2.0,
        texture_patch_size: 12,
        seed: 1,
    })
    .unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let images = data.batch(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.label_usize(i)).collect();
    let tc = TrainConfig {
        base_lr: 0.01,
        warmup_epochs: 1,
        total_epochs: 10,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 16,
        seed: 0,
    };
    let mut state = SgdState::new(model.params.len());

    // Warm up.
    for _ in 0..2 {
        let _ = model.forward_logits(&images).unwrap();
    }

    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut run = model
            .forward(&images, Mode::Train, ForwardOpts { record_grads: true, ..Default::default() })
            .unwrap();
        let loss = run.graph.cross_entropy(run.logits, &labels).unwrap();
        run.graph.backward(loss).unwrap();
        model.update_bn_stats(&run, 0.1);
        let grads: Vec<_> = run.param_vars.iter().map(|&v| run.graph.grad(v).cloned()).collect();
        sgd_step(&mut model.params, &grads, &mut state, 0.01, &tc).unwrap();
    }
    let step = t0.elapsed().as_secs_f64() / reps as f64;

    let t1 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward_logits(&images).unwrap();
    }
    let fwd = t1.elapsed().as_secs_f64() / reps as f64;

    println!("train step (batch 16): {:.1} ms", step * 1e3);
    println!("eval fwd  (batch 16): {:.1} ms", fwd * 1e3);
    // Criterion-9 projection: 3 runs x 30 epochs x (25 train batches + 7 val batches).
    let per_epoch = 25.0 * step + 7.0 * fwd;
    println!("epoch est: {:.2} s; 3x30 epochs: {:.1} min", per_epoch, 3.0 * 30.0 * per_epoch / 60.0);
}
