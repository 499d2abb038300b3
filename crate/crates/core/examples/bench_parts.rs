//! Component-level timing: which part of the pipeline dominates.

use dfadapter_core::config::ModelConfig;
use dfadapter_core::graph::Mode;
use dfadapter_core::model::{ForwardOpts, Model};
use dfadapter_core::tensor::Tensor;
use std::time::Instant;

fn time_it<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let images = Tensor::from_fn(&[16, 3, 64, 64], |i| (i % 255) as f32 / 255.0);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();

    for (gba, lsa, label) in [
        (true, true, "full   "),
        (true, false, "gba    "),
        (false, true, "lsa    "),
        (false, false, "vit    "),
    ] {
        let mut cfg = ModelConfig::tiny();
        cfg.use_gba = gba;
        cfg.use_lsa = lsa;
        let model = Model::<f32>::build(&cfg, 1).unwrap();
        let _ = model.forward_logits(&images).unwrap();
        time_it(&format!("fwd  {label}"), 5, || {
            let _ = model.forward_logits(&images).unwrap();
        });
        time_it(&format!("step {label}"), 5, || {
            let mut run = model
                .forward(&images, Mode::Train, ForwardOpts { record_grads: true, ..Default::default() })
                .unwrap();
            let loss = run.graph.cross_entropy(run.logits, &labels).unwrap();
            run.graph.backward(loss).unwrap();
        });
    }

    // Raw GEMM throughput at the conv0-2 shape.
    let a = vec![1.0f32; 64 * 576];
    let b = vec![1.0f32; 576 * 1024];
    let mut c = vec![0.0f32; 64 * 1024];
    let t = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        dfadapter_core::kernels::gemm(64, 576, 1024, 1.0f32, &a, false, &b, false, 0.0, &mut c);
    }
    let secs = t.elapsed().as_secs_f64() / reps as f64;
    println!(
        "gemm 64x576x1024: {:.2} ms  ({:.1} GMAC/s)",
        secs * 1e3,
        64.0 * 576.0 * 1024.0 / secs / 1e9
    );
}
