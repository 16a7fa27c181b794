use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nslab_core::attacker::{
    calibrate, calibrate_samples, decide_bit, leak_bit, leak_range, Channel, ExtractionPlan,
    Session,
};
use nslab_core::uarch::{
    AslrProbe, BranchPredictor, BranchSite, MicroarchState, Outcome, SecretStore, UarchParams,
    VirtualClock,
};
use nslab_core::victim::{Victim, VictimConfig};
use nslab_core::wire::{LatencyModel, Opcode, Preset, Transport};

#[derive(Debug, Clone)]
enum Op {
    LeakCache(u64),
    LeakAvx(u64),
    TransmitCache,
    TransmitAvx,
    Thrash(u64),
    Tick(u64),
    Aslr(u64, u64),
    Value(u64, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..256).prop_map(Op::LeakCache),
        (0u64..256).prop_map(Op::LeakAvx),
        Just(Op::TransmitCache),
        Just(Op::TransmitAvx),
        (0u64..2_000_000).prop_map(Op::Thrash),
        (0u64..3_000_000).prop_map(Op::Tick),
        (0u64..64, 0u64..64).prop_map(|(a, b)| Op::Aslr(a, b)),
        (0u64..4, 0u64..100).prop_map(|(s, g)| Op::Value(s, g)),
    ]
}

fn secrets(bytes: &[u8]) -> SecretStore {
    SecretStore::with_secret(2, bytes)
}

fn apply(s: &mut MicroarchState, st: &SecretStore, op: &Op, rng: &mut ChaCha8Rng) {
    match *op {
        Op::LeakCache(x) => {
            s.leak_gadget_cache(st, x);
        }
        Op::LeakAvx(x) => {
            s.leak_gadget_avx(st, x);
        }
        Op::TransmitCache => {
            s.transmit_gadget_cache();
        }
        Op::TransmitAvx => {
            s.transmit_gadget_avx();
        }
        Op::Thrash(b) => {
            s.thrash(b, rng);
        }
        Op::Tick(t) => s.clock.tick(t),
        Op::Aslr(a, b) => {
            let probe = if a < b {
                AslrProbe::Range { lo: a, mid: b }
            } else {
                AslrProbe::Index(a)
            };
            s.aslr_gadget(probe, 4, 17);
        }
        Op::Value(slot, guess) => {
            s.value_threshold_gadget(slot, 1, guess, 42);
        }
    }
}

/// Reference 2-bit counter, written independently of the model.
fn reference_counter(history: &[bool]) -> u8 {
    let mut c: i32 = 0;
    for &taken in history {
        c += if taken { 1 } else { -1 };
        c = c.clamp(0, 3);
    }
    c as u8
}

#[test]
fn predictor_matches_reference_on_every_short_sequence() {
    // Symbols: (site A | site B) x (taken | not taken).
    let sites = [BranchSite::LeakCache, BranchSite::Aslr];
    for k in 0..=8u32 {
        for code in 0..4u32.pow(k) {
            let mut p = BranchPredictor::new();
            let mut hist = [Vec::new(), Vec::new()];
            let mut c = code;
            for _ in 0..k {
                let (site, taken) = ((c % 4) / 2, c % 2 == 1);
                c /= 4;
                let before = p.counter(sites[site as usize]);
                p.train(sites[site as usize], Outcome::from(taken));
                let after = p.counter(sites[site as usize]);
                assert!(after <= 3 && before.abs_diff(after) <= 1);
                hist[site as usize].push(taken);
            }
            for (i, s) in sites.iter().enumerate() {
                assert_eq!(p.counter(*s), reference_counter(&hist[i]), "k={k} code={code}");
                assert_eq!(p.predict(*s), reference_counter(&hist[i]) >= 2);
            }
        }
    }
}

proptest! {
    #[test]
    fn clock_never_goes_back(steps in prop::collection::vec(-1_000i64..1_000_000, 1..50)) {
        let mut c = VirtualClock::new();
        for d in steps {
            let before = c.now();
            let r = c.advance(d);
            prop_assert_eq!(r.is_err(), d < 0);
            prop_assert!(c.now() >= before);
        }
    }

    #[test]
    fn avx_penalty_monotone_and_bounded(a in 0u64..3_000_000, b in 0u64..3_000_000) {
        let s = MicroarchState::new(UarchParams::default());
        let (lo, hi) = (a.min(b), a.max(b));
        let (pl, ph) = (s.avx.penalty(lo), s.avx.penalty(hi));
        prop_assert!(pl <= ph);
        prop_assert!(ph <= 366);
    }

    #[test]
    fn eviction_probability_monotone(a in 0u64..50_000_000, b in 0u64..50_000_000) {
        let p = UarchParams::default();
        let (lo, hi) = (a.min(b), a.max(b));
        let (pl, ph) = (p.eviction_probability(lo), p.eviction_probability(hi));
        prop_assert!(pl <= ph);
        prop_assert!((0.0..=1.0).contains(&pl) && (0.0..=1.0).contains(&ph));
    }

    #[test]
    fn thrash_only_clears(ops in prop::collection::vec(op(), 1..80), seed in any::<u64>()) {
        let st = secrets(b"\xa5\x3c");
        let mut s = MicroarchState::new(UarchParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for o in &ops {
            let before = s.cache.clone();
            apply(&mut s, &st, o, &mut rng);
            if let Op::Thrash(_) = o {
                prop_assert!(!s.cache.flag_cached || before.flag_cached);
                prop_assert!(s.cache.aslr_cached_offset.is_none() || before.aslr_cached_offset.is_some());
            }
            prop_assert_eq!(s.cache.delta(), 160);
        }
    }

    /// Out-of-bounds invocations never change the architectural flag or the
    /// secret, whatever the secret.
    #[test]
    fn architectural_non_interference(
        ops in prop::collection::vec(op(), 1..80),
        a in any::<[u8; 2]>(),
        b in any::<[u8; 2]>(),
        seed in any::<u64>(),
    ) {
        let (sa, sb) = (secrets(&a), secrets(&b));
        let mut x = MicroarchState::new(UarchParams::default());
        let mut y = MicroarchState::new(UarchParams::default());
        let mut rx = ChaCha8Rng::seed_from_u64(seed);
        let mut ry = ChaCha8Rng::seed_from_u64(seed);
        // Both share the public prefix, so in-bounds effects coincide.
        let oob = |o: &Op| match *o {
            Op::LeakCache(i) | Op::LeakAvx(i) => Some(i).filter(|&i| sa.in_bounds(i)).is_none(),
            _ => true,
        };
        let (sa_bytes, sb_bytes) = (sa.bytes().to_vec(), sb.bytes().to_vec());
        for o in ops.iter().filter(|o| oob(o)) {
            apply(&mut x, &sa, o, &mut rx);
            apply(&mut y, &sb, o, &mut ry);
            prop_assert_eq!(x.flag, y.flag);
        }
        prop_assert_eq!(sa.bytes(), &sa_bytes[..]);
        prop_assert_eq!(sb.bytes(), &sb_bytes[..]);
        prop_assert_eq!(&x.predictor, &y.predictor);
        prop_assert_eq!(x.clock, y.clock);
    }

    /// With the barrier on, out-of-bounds gadgets leave the side-effect
    /// state exactly as a no-op would.
    #[test]
    fn barrier_matches_noop(
        train in prop::collection::vec(any::<bool>(), 0..12),
        xs in prop::collection::vec(0u64..256, 1..40),
        secret in any::<[u8; 2]>(),
    ) {
        let st = secrets(&secret);
        let mut s = MicroarchState::new(UarchParams::default());
        for t in train {
            for site in BranchSite::ALL {
                s.predictor.train(site, Outcome::from(t));
            }
        }
        s.set_speculation_barrier(true);
        for x in xs.into_iter().filter(|&x| !st.in_bounds(x)) {
            let before = s.clone();
            s.leak_gadget_cache(&st, x);
            s.leak_gadget_avx(&st, x);
            s.aslr_gadget(AslrProbe::Range { lo: 0, mid: x + 1 }, 1, x);
            s.value_threshold_gadget(1, 1, 0, x);
            prop_assert_eq!(&s.cache, &before.cache);
            prop_assert_eq!(&s.avx, &before.avx);
            prop_assert_eq!(s.flag, before.flag);
        }
    }

    #[test]
    fn operation_sequences_are_deterministic(ops in prop::collection::vec(op(), 1..80), seed in any::<u64>()) {
        let st = secrets(b"\x0f\xf0");
        let run = || {
            let mut s = MicroarchState::new(UarchParams::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for o in &ops {
                apply(&mut s, &st, o, &mut rng);
            }
            s
        };
        prop_assert_eq!(run(), run());
    }
}

fn loopback(config: VictimConfig, seed: u64) -> Session<impl Transport> {
    Session::new(Victim::loopback(config, seed).unwrap())
}

#[test]
fn request_counts_follow_the_plan() {
    for channel in [Channel::Cache, Channel::Avx] {
        let config = VictimConfig {
            latency: LatencyModel::preset(Preset::Noiseless),
            ..VictimConfig::default()
        };
        let start = config.secrets.secret_start();
        let mut s = loopback(config, 5);
        let (n, cal, bits) = (7u64, 9u64, 3u64);
        let plan = ExtractionPlan {
            channel,
            measurements_per_bit: n as usize,
            calibration_samples: Some(cal as usize),
            target_bit_range: start..start + bits,
            ..ExtractionPlan::default()
        };
        let c = calibrate(&mut s, &plan).unwrap();
        // Corner cases: warm-up, timed hit, reset, timed miss.
        assert_eq!(s.total_requests(), cal * 4);
        let before = s.total_requests();
        leak_range(&mut s, &plan, &c, |_, _| {}).unwrap();
        let waits = match channel {
            Channel::Cache => 0,
            Channel::Avx => 1,
        };
        assert_eq!(
            s.total_requests() - before,
            bits * n * (plan.requests_per_loop() + waits)
        );
        assert_eq!(s.count(Opcode::TransmitCache) + s.count(Opcode::TransmitAvx), 3 * cal + bits * n);
    }
}

#[test]
fn error_rate_does_not_grow_with_n() {
    // Noise scaled down so errors are visible across the grid.
    let mut secret = [0u8; 25];
    ChaCha8Rng::seed_from_u64(21).fill_bytes(&mut secret);
    let config = VictimConfig {
        latency: LatencyModel::new(10_000.0, 800.0),
        ..VictimConfig::default().with_secret(&secret)
    };
    let start = config.secrets.secret_start();
    let truth: Vec<u8> = (start..start + 200).map(|x| u8::from(config.secrets.bit(x))).collect();
    let mut s = loopback(config, 22);
    let plan = ExtractionPlan {
        measurements_per_bit: 10_000,
        calibration_samples: Some(40_000),
        sample_limit: 10_000,
        ..ExtractionPlan::default()
    };
    let c = calibrate_samples(&mut s, &plan).unwrap().calibration;
    let grid = [100, 1_000, 10_000];
    let mut errors = [0usize; 3];
    for (k, x) in (start..start + 200).enumerate() {
        let r = leak_bit(&mut s, &plan, &c, x).unwrap();
        let rtts = r.samples.unwrap().rtts();
        for (g, &n) in grid.iter().enumerate() {
            errors[g] += usize::from(decide_bit(x, &rtts[..n], &plan, &c).unwrap().bit != truth[k]);
        }
    }
    assert!(errors[0] > 0, "{errors:?}");
    assert!(errors[0] >= errors[1] && errors[1] >= errors[2], "{errors:?}");
}

#[test]
fn swapping_the_planted_bit_flips_the_decision() {
    // AVX channel: the victim draws no randomness, so a paired seed gives
    // the same network noise and the two runs differ only by the bit.
    let mut z = [Vec::new(), Vec::new()];
    for seed in 0..30u64 {
        let mut bits = [0u8; 2];
        let mut means = [0.0f64; 2];
        for (secret, slot) in [(0x00u8, 0usize), (0x80, 1)] {
            let config = VictimConfig {
                latency: LatencyModel::new(10_000.0, 1_000.0),
                ..VictimConfig::default().with_secret(&[secret])
            };
            let x = config.secrets.secret_start();
            let mut s = loopback(config, seed);
            let plan = ExtractionPlan {
                channel: Channel::Avx,
                measurements_per_bit: 2_000,
                ..ExtractionPlan::default()
            };
            let cal_plan = ExtractionPlan {
                calibration_samples: Some(8_000),
                ..plan.clone()
            };
            let c = calibrate(&mut s, &cal_plan).unwrap();
            let r = leak_bit(&mut s, &plan, &c, x).unwrap();
            bits[slot] = r.bit;
            means[slot] = r.mean_ns;
            z[slot].push(r.confidence);
        }
        assert_eq!(bits, [0, 1], "seed {seed}");
        // Same noise on both sides: only the power-up penalty separates them.
        assert!((means[0] - means[1] - 183.0).abs() < 1e-6, "{means:?}");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m1) = (mean(&z[0]), mean(&z[1]));
    assert!((m0 / m1 - 1.0).abs() < 0.25, "{m0} vs {m1}");
}
