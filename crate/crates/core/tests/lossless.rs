use axonflow::compiler::{compile, CompileOptions, Cut, CutPlan, Mesh, NeuronType};
use axonflow::nngraph::random::{generator_kinds, random_graph, RandomGraphConfig};
use axonflow::nngraph::{dense_oracle, dense_oracle_with_ops, lower, LoweredGraph, Tensor};
use axonflow::runtime::{run, run_sequence, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn random_bounds(rng: &mut ChaCha8Rng, n: u32) -> Vec<u32> {
    let mut b: Vec<u32> = (1..n).filter(|_| rng.gen_bool(0.35)).collect();
    b.insert(0, 0);
    b.push(n);
    b
}

fn random_cuts(rng: &mut ChaCha8Rng, lg: &LoweredGraph) -> BTreeMap<String, CutPlan> {
    let mut cuts = BTreeMap::new();
    for f in &lg.fms {
        if rng.gen_bool(0.6) {
            let s = f.shape;
            let cut = Cut { c: random_bounds(rng, s.d), x: random_bounds(rng, s.w), y: random_bounds(rng, s.h) };
            cuts.insert(f.id.clone(), CutPlan::Bounds(cut));
        }
    }
    cuts
}

#[test]
fn random_graphs_with_random_cuts_are_lossless() {
    let cfg = RandomGraphConfig::default();
    let kinds = generator_kinds(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    for i in 0..300 {
        let g = random_graph(&mut rng, &cfg, Some(&kinds[i % kinds.len()]));
        let lg = lower(&g).unwrap();
        let opts = CompileOptions {
            cuts: random_cuts(&mut rng, &lg),
            mesh: Mesh::new(16, 16),
            auto_mesh: true,
            ..Default::default()
        };
        let prog = compile(&lg, &opts).unwrap_or_else(|e| panic!("graph {i}: {e}\n{}", g.to_json()));
        let mut ins = BTreeMap::new();
        for (_, f) in lg.inputs() {
            ins.insert(f.id.clone(), Tensor::random(f.shape, &mut rng));
        }
        let (want, ops) = dense_oracle_with_ops(&lg, &ins).unwrap();
        let got = run(&prog, &ins, RunOptions { hit_detection: true, shuffle_seed: Some(i as u64) })
            .unwrap_or_else(|e| panic!("graph {i}: {e}\n{}", g.to_json()));
        for (id, t) in &want {
            assert_eq!(got.outputs[id], *t, "graph {i} view {id}\n{}", g.to_json());
        }
        assert_eq!(got.stats.synapse_updates, ops, "graph {i}");
        assert_eq!(got.stats.stride_waste, 0);
        let plain = run(&prog, &ins, RunOptions { hit_detection: false, shuffle_seed: None }).unwrap();
        assert_eq!(plain.outputs, got.outputs, "graph {i}");
        assert_eq!(plain.stats.events_sent, got.stats.events_sent + got.stats.events_dropped);
    }
}

#[test]
fn sigma_delta_sequences_match_per_frame() {
    let cfg = RandomGraphConfig { allow_nonlinear_rules: false, ..Default::default() };
    let kinds = generator_kinds(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..60 {
        let g = random_graph(&mut rng, &cfg, Some(&kinds[i % kinds.len()]));
        let lg = lower(&g).unwrap();
        let opts = CompileOptions { mode: NeuronType::SigmaDelta, cuts: random_cuts(&mut rng, &lg), auto_mesh: true, ..Default::default() };
        let prog = compile(&lg, &opts).unwrap();
        let mut frames = Vec::new();
        for _ in 0..5 {
            let mut ins = BTreeMap::new();
            for (_, f) in lg.inputs() {
                ins.insert(f.id.clone(), Tensor::random(f.shape, &mut rng));
            }
            frames.push(ins);
        }
        // frame 3 repeats frame 2
        frames[3] = frames[2].clone();
        let out = run_sequence(&prog, &frames, RunOptions::default()).unwrap();
        for (k, (fr, ins)) in out.iter().zip(&frames).enumerate() {
            let want = dense_oracle(&lg, ins).unwrap();
            for (id, t) in &want {
                assert_eq!(fr.outputs[id], *t, "graph {i} frame {k} view {id}");
            }
        }
        assert_eq!(out[3].stats.events_sent, 0);
    }
}
