use cskd::harness::{train, DatasetSpec, OptimizerConfig, TrainConfig};
use cskd::losses::{LossConfig, LossKind};
use cskd::models::ModelSpec;

fn run(kind: LossKind, seed: u64, dim: usize, lr0: f64, drops: Vec<usize>) -> (f64, f64, f64) {
    let cfg = TrainConfig {
        dataset: DatasetSpec::Synth { classes: 8, per_class: 157, dim, spread: 0.6, seed: 7 },
        model: ModelSpec::Mlp { input: dim, hidden: vec![64, 32], classes: 8 },
        loss: LossConfig { kind, temperature: 4.0, lambda_cls: 1.0, ..Default::default() },
        optimizer: OptimizerConfig { lr0, ..Default::default() },
        lr_drops: drops,
        epochs: 30,
        batch_size: 32,
        seed,
        eval_every: 30,
        augment: None,
        teacher_checkpoint: None,
        output_dir: None,
    };
    let m = train(&cfg).unwrap();
    let e = m.final_eval().unwrap();
    (e.top1_error, e.ece, e.recall_at_1)
}

fn main() {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (dim, lr0, drops) in [
        (16usize, 0.1, vec![10usize, 20]),
        (16, 0.05, vec![20, 25]),
        (16, 0.03, vec![20, 25]),
        (16, 0.02, vec![20, 25]),
        (32, 0.03, vec![20, 25]),
        (8, 0.03, vec![20, 25]),
    ] {
        let mut out = String::new();
        for kind in [LossKind::Ce, LossKind::Cskd] {
            let (mut t1, mut ec, mut r1) = (vec![], vec![], vec![]);
            for seed in [0u64, 1, 2] {
                let (a, b, c) = run(kind, seed, dim, lr0, drops.clone());
                t1.push(a); ec.push(b); r1.push(c);
            }
            out += &format!("{kind:?}: top1 {:.3} ece {:.4} r1 {:.1} | ", mean(&t1), mean(&ec), mean(&r1));
        }
        println!("d={dim} lr0={lr0} drops={drops:?}: {out}");
    }
}
