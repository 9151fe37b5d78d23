//! Scratch probe: fit one sphere SDF with a fixed cloud, no episodes.
use gensdf::autodiff::{Tape, Tensor};
use gensdf::geometry::{exact_sdf, sample_queries, sample_surface, Pose, ShapeFamily, ShapeInstance};
use gensdf::model::{ConditionalSdfModel, DecoderConfig, EncoderConfig, EncoderVariant};
use gensdf::training::{adam_step, AdamState};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let variant = std::env::args().nth(3).unwrap_or_else(|| "grid".into());
    let shape = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.45 }, Pose::default(), "s").unwrap();
    let cloud = sample_surface(&shape, 2048, 1).unwrap();
    let mut model = ConditionalSdfModel::new(
        EncoderConfig {
            variant: if variant == "grid" { EncoderVariant::GridLocal } else { EncoderVariant::GlobalLatent },
            point_mlp_widths: vec![64, 128],
            latent_dim: 64,
            grid_resolution: 16,
        },
        DecoderConfig { hidden: vec![128, 128, 128, 128] },
        3,
    ).unwrap();
    let mut adam = AdamState::new(model.params());
    for step in 0..steps {
        let samples = sample_queries(&shape, &cloud, 461, 51, 0.05, step as u64, true).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true).unwrap();
        let feats = model.encode_graph(&mut tape, &bound, &cloud).unwrap();
        let xs: Vec<_> = samples.iter().map(|s| s.x).collect();
        let q = model.queries_leaf(&mut tape, &xs, false).unwrap();
        let preds = model.decode_graph(&mut tape, &bound, q, &feats).unwrap();
        let gts = tape.constant(Tensor::from_vec(vec![xs.len(), 1], samples.iter().map(|s| s.gt_sdf.unwrap()).collect()).unwrap()).unwrap();
        let d = tape.sub(preds, gts).unwrap();
        let a = tape.abs(d).unwrap();
        let loss = tape.reduce_mean(a).unwrap();
        let lv = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = bound.ids().iter().zip(model.params().iter())
            .map(|(&id, p)| tape.grad(id).unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))).collect();
        adam_step(model.params_mut(), &grads, &mut adam, lr, 0.9, 0.999, 1e-8);
        if step % 200 == 0 || step + 1 == steps {
            // Also report a fixed eval: mean |err| near surface.
            let eval = sample_queries(&shape, &cloud, 300, 0, 0.05, 999_999, true).unwrap();
            let f = model.encode(&cloud).unwrap();
            let exs: Vec<_> = eval.iter().map(|s| s.x).collect();
            let preds = model.predict_batch(&exs, &f).unwrap();
            let e: f64 = preds.iter().zip(&eval).map(|(p, s)| (p - s.gt_sdf.unwrap()).abs()).sum::<f64>() / exs.len() as f64;
            println!("step {step}: train {lv:.5}, eval-near {e:.5}");
        }
    }
    let f = model.encode(&cloud).unwrap();
    let c = model.predict(&gensdf::geometry::Point3::zero(), &f).unwrap();
    println!("predict(center) = {c:.4} (want {:.4})", exact_sdf(&shape, &gensdf::geometry::Point3::zero()));
}
