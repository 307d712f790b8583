use axonflow::compiler::descriptor::{extent_bound, Axon, DescriptorError, KernelDescriptor, NeuronType, PopulationDescriptor};
use axonflow::nngraph::{Activation, NeuronRule, UpdateRule};
use proptest::prelude::*;

fn extent() -> impl Strategy<Value = u32> {
    prop_oneof![0u32..64, (8u32..72).prop_map(|k| k * 8)]
}

fn axon() -> impl Strategy<Value = Axon> {
    (
        (-256i32..256, -256i32..256, 0u32..1024, extent(), extent()),
        (1u32..16, 1u32..16, 0u32..8, -8i32..8, -8i32..8, 0u32..8),
    )
        .prop_map(|((x_off, y_off, c_off, w, h), (kw, kh, us, dx, dy, pop_id))| Axon {
            x_off,
            y_off,
            c_off,
            w,
            h,
            kw,
            kh,
            us,
            dx,
            dy,
            pop_id,
        })
}

fn update_rule() -> impl Strategy<Value = UpdateRule> {
    prop_oneof![Just(UpdateRule::Accumulate), Just(UpdateRule::Max), Just(UpdateRule::MulA), Just(UpdateRule::MulB)]
}

fn kd() -> impl Strategy<Value = KernelDescriptor> {
    (0u32..1024, 1u32..16, 1u32..16, 0u32..2, 0u32..1 << 15, update_rule(), 0u32..16, 0u32..1024).prop_map(
        |(kd, kw, kh, sl, weight_ptr, rule, scale_log, c_base)| KernelDescriptor { kd, kw, kh, sl, weight_ptr, rule, scale_log, c_base },
    )
}

fn pop() -> impl Strategy<Value = PopulationDescriptor> {
    (
        (0u32..1024, 0u32..256, 0u32..256),
        prop_oneof![Just(NeuronType::Standard), Just(NeuronType::SigmaDelta)],
        prop_oneof![Just(Activation::Identity), Just(Activation::Relu)],
        (0u32..1024, 0u32..1 << 15, 0u32..2),
        prop_oneof![Just(NeuronRule::Accumulate), Just(NeuronRule::Max), Just(NeuronRule::Multiply)],
    )
        .prop_map(|((d, w, h), neuron_type, activation, (axon_count, state_ptr, sl), rule)| PopulationDescriptor {
            d,
            w,
            h,
            neuron_type,
            activation,
            axon_count,
            state_ptr,
            sl,
            rule,
        })
}

fn overflows<T>(r: Result<T, DescriptorError>) -> bool {
    matches!(r, Err(DescriptorError::FieldOverflow { .. }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn axon_round_trips(a in axon()) {
        let w = a.pack().unwrap();
        prop_assert_eq!(Axon::unpack(w).unwrap(), a);
        prop_assert_eq!(Axon::unpack(w).unwrap().pack().unwrap(), w);
    }

    #[test]
    fn kd_round_trips(k in kd()) {
        let w = k.pack().unwrap();
        prop_assert_eq!(KernelDescriptor::unpack(w).unwrap(), k);
    }

    #[test]
    fn pop_round_trips(p in pop()) {
        let w = p.pack().unwrap();
        prop_assert_eq!(PopulationDescriptor::unpack(w).unwrap(), p);
    }

    #[test]
    fn decodable_words_repack_exactly(w in any::<u64>()) {
        if let Ok(a) = Axon::unpack(w) {
            prop_assert_eq!(a.pack().unwrap(), w);
        }
        if let Ok(k) = KernelDescriptor::unpack(w) {
            prop_assert_eq!(k.pack().unwrap(), w);
        }
        if let Ok(p) = PopulationDescriptor::unpack(w) {
            prop_assert_eq!(p.pack().unwrap(), w);
        }
    }

    #[test]
    fn axon_out_of_range_fields_overflow(a in axon(), field in 0usize..9, big in 0u32..1000) {
        let mut b = a;
        match field {
            0 => b.x_off = 256 + big as i32,
            1 => b.y_off = -257 - big as i32,
            2 => b.c_off = 1024 + big,
            3 => b.w = 569 + big,
            4 => b.kh = 16 + big,
            5 => b.us = 8 + big,
            6 => b.dx = 8 + big as i32,
            7 => b.dy = -9 - big as i32,
            _ => b.pop_id = 8 + big,
        }
        prop_assert!(overflows(b.pack()));
    }

    #[test]
    fn kd_and_pop_out_of_range_fields_overflow(k in kd(), p in pop(), field in 0usize..4, big in 0u32..1000) {
        let (mut k2, mut p2) = (k, p);
        match field {
            0 => { k2.kd = 1024 + big; p2.d = 1024 + big }
            1 => { k2.weight_ptr = (1 << 15) + big; p2.state_ptr = (1 << 15) + big }
            2 => { k2.c_base = 1024 + big; p2.axon_count = 1024 + big }
            _ => { k2.sl = 2 + big; p2.w = 256 + big }
        }
        prop_assert!(overflows(k2.pack()));
        prop_assert!(overflows(p2.pack()));
    }

    #[test]
    fn extent_bound_is_encodable_and_tight(w in 0u32..=568) {
        let b = extent_bound(w);
        prop_assert!(b >= w && b - w < 8);
        let a = Axon { x_off: 0, y_off: 0, c_off: 0, w: b, h: 1, kw: 1, kh: 1, us: 0, dx: 0, dy: 0, pop_id: 0 };
        prop_assert!(a.pack().is_ok());
    }
}
