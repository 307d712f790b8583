use axonflow::compiler::{compile, CompileOptions};
use axonflow::memmodel::{compare, fanouts, mem_flat_lut, mem_hier_lut, mem_proposed, BitWidthConfig, Scheme};
use axonflow::nngraph::random::{generator_kinds, random_graph, RandomGraphConfig};
use axonflow::nngraph::{lower, LoweredGraph};
use axonflow::zoo;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64) -> LoweredGraph {
    let cfg = RandomGraphConfig::default();
    let kinds = generator_kinds(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = kinds[seed as usize % kinds.len()].clone();
    lower(&random_graph(&mut rng, &cfg, Some(&k))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fanouts_sum_to_synapses(seed in any::<u64>()) {
        let lg = graph(seed);
        let total: u64 = (0..lg.fms.len()).map(|i| fanouts(&lg, i).iter().sum::<u64>()).sum();
        prop_assert_eq!(total, lg.synapses());
        prop_assert_eq!(mem_flat_lut(&lg, &BitWidthConfig::default()).synapses, lg.synapses());
    }

    #[test]
    fn hier_connectivity_shrinks_with_wider_groups(seed in any::<u64>(), m in 1u64..64) {
        let lg = graph(seed);
        let narrow = BitWidthConfig { m, ..Default::default() };
        let wide = BitWidthConfig { m: m * 2, ..Default::default() };
        let a = mem_hier_lut(&lg, &narrow).total.connectivity;
        let b = mem_hier_lut(&lg, &wide).total.connectivity;
        prop_assert!(b <= a);
        // destination entries alone are a floor
        prop_assert!(b * 8 + 8 * lg.fms.len() as u64 >= lg.synapses() * wide.hier_dst_entry_bits);
    }

    #[test]
    fn proposed_categories_partition_the_images(seed in any::<u64>()) {
        let lg = graph(seed);
        let p = compile(&lg, &CompileOptions { auto_mesh: true, ..Default::default() }).unwrap();
        let r = mem_proposed(&p);
        prop_assert_eq!(r.total.total(), p.total_words() * 8);
        prop_assert_eq!(r.cores.iter().map(|c| c.bytes).sum::<u64>(), p.total_words() * 8);
        let layer_sum: u64 = r.layers.iter().map(|l| l.bytes.total()).sum();
        prop_assert_eq!(layer_sum, r.total.total());
    }

    #[test]
    fn ratios_are_reference_over_scheme(seed in any::<u64>()) {
        let lg = graph(seed);
        let p = compile(&lg, &CompileOptions { auto_mesh: true, ..Default::default() }).unwrap();
        let cfg = BitWidthConfig::default();
        let reports = [mem_proposed(&p), mem_flat_lut(&lg, &cfg), mem_hier_lut(&lg, &cfg)];
        let c = compare(&reports).unwrap();
        let hier = reports[2].total.total() as f64;
        prop_assert_eq!(c.reference, Scheme::Proposed);
        let prop = c.ratios.iter().find(|r| r.scheme == Scheme::HierLut).unwrap();
        prop_assert!((prop.total - hier / reports[0].total.total() as f64).abs() < 1e-9);
    }
}

#[test]
fn zoo_builds_are_seed_deterministic() {
    for n in zoo::NETWORKS {
        let a = zoo::build_truncated(n, 8, 16).unwrap();
        let b = zoo::build_truncated(n, 8, 16).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "{n}");
        let lg = lower(&a).unwrap();
        let p1 = compile(&lg, &CompileOptions { auto_mesh: true, ..Default::default() }).unwrap();
        let p2 = compile(&lg, &CompileOptions { auto_mesh: true, ..Default::default() }).unwrap();
        let bytes = |p: &axonflow::compiler::Program| p.images.iter().map(|i| i.to_bytes().unwrap()).collect::<Vec<_>>();
        assert_eq!(bytes(&p1), bytes(&p2), "{n}");
    }
}
