use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollnet::model::{read_checkpoint, write_checkpoint, ModelConfig, ModelParams};
use rollnet::rolls::{read_prl, write_prl, AnyRoll, InstrumentRoll, Pianoroll, PitchRoll};

fn roundtrip(roll: AnyRoll) -> AnyRoll {
    let mut buf = Vec::new();
    write_prl(&roll, &mut buf).unwrap();
    read_prl(buf.as_slice()).unwrap()
}

fn bits_of(r: &AnyRoll) -> Vec<u32> {
    let d = match r {
        AnyRoll::Pianoroll(p) => p.data(),
        AnyRoll::Pitch(p) => p.data(),
        AnyRoll::Instrument(p) => p.data(),
    };
    d.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prl_roundtrips_any_contents(
        f in 1usize..20, t in 0usize..40, m in 1usize..10,
        binary in any::<bool>(), seed in any::<u64>(), fr in 1.0f64..100.0, id in "[a-z0-9+]{0,12}",
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = |rng: &mut ChaCha8Rng| if binary { rng.gen_range(0..2) as f32 } else { rng.gen::<f32>() };
        let roll = Pianoroll::new((0..f * t * m).map(|_| cell(&mut rng)).collect(), f, t, m, fr, id.clone()).unwrap();
        let pitch = PitchRoll::new((0..f * t).map(|_| cell(&mut rng)).collect(), f, t, fr).unwrap();
        let inst = InstrumentRoll::new((0..m * t).map(|_| cell(&mut rng)).collect(), m, t, fr, id).unwrap();
        for r in [AnyRoll::from(roll), pitch.into(), inst.into()] {
            let back = roundtrip(r.clone());
            prop_assert_eq!(bits_of(&back), bits_of(&r));
            prop_assert_eq!(back, r);
        }
    }

    #[test]
    fn label_marginals_are_logical_or(f in 1usize..12, t in 1usize..12, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let roll = Pianoroll::new((0..f * t * m).map(|_| rng.gen_range(0..2) as f32).collect(), f, t, m, 31.25, "v").unwrap();
        let (p, i) = (roll.marginalize_pitch(), roll.marginalize_instrument());
        for ff in 0..f {
            for tt in 0..t {
                let any = (0..m).any(|mm| roll.get(ff, tt, mm) == 1.0);
                prop_assert_eq!(p.get(ff, tt), any as u8 as f32);
            }
        }
        for mm in 0..m {
            for tt in 0..t {
                let any = (0..f).any(|ff| roll.get(ff, tt, mm) == 1.0);
                prop_assert_eq!(i.get(mm, tt), any as u8 as f32);
            }
        }
    }
}

#[test]
fn full_size_binary_roll_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let roll = Pianoroll::new((0..88 * 320 * 9).map(|_| rng.gen_range(0..2) as f32).collect(), 88, 320, 9, 31.25, "nine").unwrap();
    assert_eq!(roundtrip(roll.clone().into()), AnyRoll::Pianoroll(roll));
}

#[test]
fn thousand_random_rolls_marginalize_to_or() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..1000 {
        let (f, t, m) = (rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..5));
        let p = rng.gen_range(0.0..1.0);
        let roll = Pianoroll::new((0..f * t * m).map(|_| rng.gen_bool(p) as u8 as f32).collect(), f, t, m, 31.25, "v").unwrap();
        let (pp, ii) = (roll.marginalize_pitch(), roll.marginalize_instrument());
        let mut want_p = vec![0.0f32; f * t];
        let mut want_i = vec![0.0f32; m * t];
        for mm in 0..m {
            for tt in 0..t {
                for ff in 0..f {
                    if roll.get(ff, tt, mm) == 1.0 {
                        want_p[ff * t + tt] = 1.0;
                        want_i[mm * t + tt] = 1.0;
                    }
                }
            }
        }
        for ff in 0..f {
            for tt in 0..t {
                assert_eq!(pp.get(ff, tt), want_p[ff * t + tt]);
            }
        }
        for mm in 0..m {
            for tt in 0..t {
                assert_eq!(ii.get(mm, tt), want_i[mm * t + tt]);
            }
        }
    }
}

#[test]
fn checkpoints_roundtrip_randomized_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for case in 0..8 {
        let mut cfg = ModelConfig::new(rng.gen_range(1..9), format!("v{case}"));
        cfg.widths = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..6)).collect();
        let mut p = ModelParams::<f32>::init(cfg, rng.gen()).unwrap();
        let names: Vec<String> = p.tensors().keys().cloned().collect();
        for n in &names {
            p.get_mut(n)
                .unwrap()
                .iter_mut()
                .for_each(|v| *v = f32::from_bits(rng.gen_range(0..0x7f00_0000)) * if rng.gen() { 1.0 } else { -1.0 });
        }
        let step = rng.gen();
        let mut buf = Vec::new();
        write_checkpoint(&p, step, &mut buf).unwrap();
        let back = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(back.step, step);
        assert_eq!(back.params.config(), p.config());
        for (name, t) in p.tensors() {
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.params.get(name).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }
}
