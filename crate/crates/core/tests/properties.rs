//! Property tests over randomly drawn grids, masks and edits.

use iteredit::codec::{decode, encode};
use iteredit::editor::renormalize_with_reference;
use iteredit::sampler::{masked_reverse_step, reverse_step, MaskInputs};
use iteredit::{
    CodecConfig, ConditionalDenoiser, Denoiser, EditInstruction, LatentGrid, Mask, MaskMode, NoiseSchedule,
    ReverseMethod, RngStream, SamplerConfig, ScheduleKind,
};
use proptest::prelude::*;

fn grid(h: usize, w: usize, c: usize) -> impl Strategy<Value = LatentGrid> {
    proptest::collection::vec(-6.0f64..6.0, h * w * c).prop_map(move |v| LatentGrid::new(h, w, c, v).unwrap())
}

fn method() -> impl Strategy<Value = ReverseMethod> {
    prop_oneof![
        Just(ReverseMethod::DdpmFull),
        Just(ReverseMethod::DdpmLiteral),
        Just(ReverseMethod::EulerAncestral)
    ]
}

fn mode() -> impl Strategy<Value = MaskMode> {
    prop_oneof![Just(MaskMode::Eq8Literal), Just(MaskMode::Pin), Just(MaskMode::Direction)]
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_lands_on_lattice_within_range(img in grid(6, 8, 2)) {
        let cfg = CodecConfig::default();
        let z = encode(&img, &cfg).unwrap();
        prop_assert_eq!((z.height(), z.width(), z.channels()), (3, 4, 2));
        for &v in z.as_slice() {
            prop_assert!(cfg.on_lattice(v), "{}", v);
            prop_assert!(v.abs() <= cfg.range);
        }
    }

    #[test]
    fn encode_of_decode_of_lattice_values_stays_on_lattice(idx in proptest::collection::vec(0usize..32, 16)) {
        let cfg = CodecConfig::default();
        let z = LatentGrid::new(4, 4, 1, idx.iter().map(|&i| cfg.lattice_point(i)).collect()).unwrap();
        let back = encode(&decode(&z, &cfg).unwrap(), &cfg).unwrap();
        prop_assert!(back.as_slice().iter().all(|&v| cfg.on_lattice(v)));
    }

    #[test]
    fn renormalized_mean_equals_reference(z in grid(4, 4, 1), reference in -3.0f64..3.0) {
        let (out, f) = renormalize_with_reference(&z, reference);
        if z.mean().abs() < 1e-8 {
            prop_assert_eq!(f, 1.0);
            prop_assert_eq!(out, z);
        } else {
            prop_assert!((out.mean() - reference).abs() <= 1e-9 * (1.0 + reference.abs() + f.abs()));
        }
    }

    #[test]
    fn all_ones_mask_step_is_bit_identical(
        z in grid(3, 3, 2),
        src in grid(3, 3, 2),
        t in 1usize..=20,
        method in method(),
        mode in mode(),
        seed in any::<u64>(),
    ) {
        let s = sched();
        let cfg = SamplerConfig { method, mask_mode: mode, add_final_noise: false };
        let edit = EditInstruction::constant("e", z.dims(), 1.2, 0.3, 0.2).unwrap();
        let eps = ConditionalDenoiser::new(&edit, &src).unwrap().predict(&z, t, &s).unwrap();
        let recon_edit = EditInstruction::identity(z.dims(), 0.2).unwrap();
        let recon = ConditionalDenoiser::new(&recon_edit, &src).unwrap().predict(&z, t, &s).unwrap();
        let plain = reverse_step(&z, t, &eps, &s, &cfg, &mut RngStream::new(seed)).unwrap();
        let inputs = MaskInputs { z_src: Some(&src), eps_recon: Some(&recon) };
        let masked = masked_reverse_step(&z, t, &eps, &Mask::ones(3, 3).unwrap(), inputs, &s, &cfg, &mut RngStream::new(seed)).unwrap();
        let bits = |g: &LatentGrid| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&plain), bits(&masked));
    }

    #[test]
    fn pin_mode_final_step_restores_frozen_region(
        z in grid(4, 4, 1),
        src in grid(4, 4, 1),
        bits in proptest::collection::vec(0u8..2, 16),
        seed in any::<u64>(),
    ) {
        let s = sched();
        let cfg = SamplerConfig { mask_mode: MaskMode::Pin, ..SamplerConfig::default() };
        let mask = Mask::new(4, 4, &bits).unwrap();
        let eps = LatentGrid::zeros(4, 4, 1).unwrap();
        let inputs = MaskInputs { z_src: Some(&src), eps_recon: None };
        let out = masked_reverse_step(&z, 1, &eps, &mask, inputs, &s, &cfg, &mut RngStream::new(seed)).unwrap();
        for (i, &b) in bits.iter().enumerate() {
            if b == 0 {
                prop_assert_eq!(out.as_slice()[i], src.as_slice()[i]);
            }
        }
    }

    #[test]
    fn composition_equals_sequential_targets(
        z in grid(2, 3, 2),
        gains in proptest::collection::vec(-2.0f64..2.0, 3),
        biases in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let edits: Vec<EditInstruction> = gains
            .iter()
            .zip(&biases)
            .enumerate()
            .map(|(i, (&g, &b))| EditInstruction::constant(format!("e{i}"), z.dims(), g, b, 0.1).unwrap())
            .collect();
        let composed = EditInstruction::compose(&edits).unwrap().target(&z).unwrap();
        let sequential = edits.iter().fold(z.clone(), |acc, e| e.target(&acc).unwrap());
        for (a, b) in composed.as_slice().iter().zip(sequential.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
