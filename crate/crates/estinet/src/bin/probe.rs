// Scratch capacity/speed probe for estimator pretraining. Not part of the
// deliverable surface; run manually via `cargo run --release --bin probe`.

use estinet::codec::{encode_nan, encode_number, CodecConfig};
use estinet::graph::{Adam, Graph, ParamStore};
use estinet::layers::TransformerEncoder;
use estinet::oracle::{sample_api_io, IoPair, LogicOp};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn encode_batch(pairs: &[&IoPair], cfg: &CodecConfig) -> (ArrayD<f32>, ArrayD<f32>) {
    let b = pairs.len();
    let rows = pairs[0].column.len();
    let d = cfg.dim;
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[b, rows + 1, d]));
    let mut t = ArrayD::<f32>::zeros(IxDyn(&[b, rows, 2]));
    for (i, p) in pairs.iter().enumerate() {
        let arg = if p.argument.is_nan() { encode_nan(cfg) } else { encode_number(p.argument, cfg) };
        for (j, &v) in arg.as_slice().iter().enumerate() {
            x[[i, 0, j]] = v;
        }
        for (r, &cell) in p.column.iter().enumerate() {
            let e = encode_number(cell, cfg);
            for (j, &v) in e.as_slice().iter().enumerate() {
                x[[i, r + 1, j]] = v;
            }
            t[[i, r, if p.output[r] { 1 } else { 0 }]] = 1.0;
        }
    }
    (x, t)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_layers: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let d_ff: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let n_pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let op_name = args.get(4).cloned().unwrap_or_else(|| "greater_than".into());
    let lr: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let op = LogicOp::from_name(&op_name).unwrap();
    let cfg = CodecConfig::default();
    let rows = 25;
    let batch = 64;

    let pairs = sample_api_io(op, n_pairs, rows, (1, 100), 17);
    let eval_pairs = sample_api_io(op, 1000, rows, (1, 100), 18);
    let test_pairs = sample_api_io(op, 1000, rows, (300, 400), 19);

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = TransformerEncoder::new(&mut store, &mut rng, "esti", cfg.dim, n_layers, 4, d_ff);
    let arg_slot = estinet::layers::init_uniform(&mut store, &mut rng, "esti.slot.arg", &[1, cfg.dim], 0.5);
    let cell_slot = estinet::layers::init_uniform(&mut store, &mut rng, "esti.slot.cell", &[1, cfg.dim], 0.5);
    let n_params: usize = store.iter().map(|(_, p)| p.value.len()).sum();
    println!("layers={n_layers} d_ff={d_ff} pairs={n_pairs} op={op_name} lr={lr} params={n_params}");

    let mut adam = Adam::new(lr, &store);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(2);

    let slotted = |g: &mut Graph<f32>, store: &ParamStore<f32>, xn: estinet::graph::NodeId| {
        let a = g.param(store, arg_slot);
        let c = g.param(store, cell_slot);
        let c25 = g.select_rows(c, vec![0; rows]);
        let slots = g.concat(&[a, c25], 0);
        g.add_bcast0(xn, slots)
    };

    let eval = |store: &ParamStore<f32>, pairs: &[IoPair]| -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in pairs.chunks(256) {
            let refs: Vec<&IoPair> = chunk.iter().collect();
            let (x, _) = encode_batch(&refs, &cfg);
            let mut g = Graph::<f32>::new();
            let xn = g.constant(x);
            let xn = slotted(&mut g, store, xn);
            let logits = enc.logits(&mut g, store, xn);
            let out = g.narrow(logits, 1, 1, rows);
            let v = g.value(out);
            for (i, p) in chunk.iter().enumerate() {
                for r in 0..rows {
                    let pred = v[[i, r, 1]] > v[[i, r, 0]];
                    if pred == p.output[r] {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        correct as f64 / total as f64
    };

    let t0 = Instant::now();
    for epoch in 0..40 {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&IoPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (x, t) = encode_batch(&refs, &cfg);
            let mut g = Graph::<f32>::new();
            let xn = g.constant(x);
            let xn = slotted(&mut g, &store, xn);
            let logits = enc.logits(&mut g, &store, xn);
            let out = g.narrow(logits, 1, 1, rows);
            let probs = g.softmax(out);
            let w = ArrayD::from_elem(IxDyn(&[refs.len(), rows]), 1.0f32);
            let loss = g.cross_entropy_mean(probs, t, w);
            loss_sum += g.value(loss)[[]] as f64;
            steps += 1;
            g.backward(&[(loss, 1.0)], &std::collections::HashSet::new(), &mut store, None);
            adam.step(&mut store);
        }
        let acc = eval(&store, &eval_pairs);
        println!(
            "epoch {epoch:2} loss {:.4} in-range acc {:.4} ({:.1}s)",
            loss_sum / steps as f64,
            acc,
            t0.elapsed().as_secs_f64()
        );
        if acc >= 0.995 {
            break;
        }
    }
    println!("test-range acc {:.4}", eval(&store, &test_pairs));
}
