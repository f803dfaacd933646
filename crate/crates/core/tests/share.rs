use std::time::Duration;

use p2n2::share::{reconstruct, share, MpcParty, SeededDealer, ShareMatrix, SharedDealer, TripleDims, TripleProvider};
use p2n2::transport::{Link, Tap};
use p2n2::{Error, FxConfig, FxMatrix, RoleId, SeedTree};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

const TAG: [u8; 16] = [1; 16];

fn parties(seed: u64) -> (MpcParty, MpcParty) {
    let cfg = FxConfig::default();
    let root = SeedTree::new(seed);
    let (da, db) = SharedDealer::pair(root.child("dealer"), None);
    (
        MpcParty::new(RoleId::HolderA, cfg, TAG, Box::new(da), root.child("mask-a")).unwrap(),
        MpcParty::new(RoleId::HolderB, cfg, TAG, Box::new(db), root.child("mask-b")).unwrap(),
    )
}

/// Runs holder A on this thread and holder B on a helper thread.
fn run_pair<RA, RB: Send + 'static>(
    seed: u64,
    tap: Option<Tap>,
    fa: impl FnOnce(&mut MpcParty, &mut Link) -> RA,
    fb: impl FnOnce(&mut MpcParty, &mut Link) -> RB + Send + 'static,
) -> (RA, RB) {
    let (mut pa, mut pb) = parties(seed);
    let (mut la, mut lb) = Link::loopback_pair(RoleId::HolderA, RoleId::HolderB, Duration::from_secs(20));
    la.set_tap(tap.clone());
    lb.set_tap(tap);
    let h = std::thread::spawn(move || fb(&mut pb, &mut lb));
    let ra = fa(&mut pa, &mut la);
    (ra, h.join().unwrap())
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()
}

fn real_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn decode_pair(a: &ShareMatrix, b: &ShareMatrix) -> Vec<f64> {
    reconstruct(a, b).unwrap().decode(&FxConfig::default())
}

#[test]
fn share_payload_is_uniform() {
    let cfg = FxConfig::default();
    let m = FxMatrix::encode(1, 1, &[3.5], &cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let n = 10_000.0;
    let mut hi = [0u32; 16];
    let mut lo = [0u32; 16];
    for _ in 0..10_000 {
        let (a, _) = share(&m, TAG, &mut rng);
        let v = a.payload.get(0, 0).0;
        hi[(v >> 60) as usize] += 1;
        lo[((v >> 28) & 0xf) as usize] += 1;
    }
    let p: f64 = 1.0 / 16.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for bins in [hi, lo] {
        let mut chi2 = 0.0;
        for c in bins {
            assert!((c as f64 - n * p).abs() < 5.0 * sigma, "{bins:?}");
            chi2 += (c as f64 - n * p).powi(2) / (n * p);
        }
        // 15 degrees of freedom; 44.3 is the 1e-4 upper quantile.
        assert!(chi2 < 44.3, "chi2 {chi2}");
    }
}

#[test]
fn share_reconstruct_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let words = (0..r * c).map(|_| rng.next_u64()).collect();
        let m = FxMatrix::from_u64(r, c, words).unwrap();
        let (a, b) = share(&m, TAG, &mut rng);
        assert_eq!(reconstruct(&a, &b).unwrap(), m);
    }
}

proptest! {
    #[test]
    fn reconstruct_is_additive(w1 in proptest::collection::vec(any::<u64>(), 6), w2 in proptest::collection::vec(any::<u64>(), 6), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m1 = FxMatrix::from_u64(2, 3, w1).unwrap();
        let m2 = FxMatrix::from_u64(2, 3, w2).unwrap();
        let (a, b) = share(&m1, TAG, &mut rng);
        let (c, d) = share(&m2, TAG, &mut rng);
        let ac = ShareMatrix { payload: a.payload.add(&c.payload).unwrap(), ..a.clone() };
        let bd = ShareMatrix { payload: b.payload.add(&d.payload).unwrap(), ..b.clone() };
        prop_assert_eq!(reconstruct(&ac, &bd).unwrap(), m1.add(&m2).unwrap());
    }
}

fn shared_product(seed: u64, x: Vec<f64>, y: Vec<f64>, n: usize, k: usize, m: usize) -> Vec<f64> {
    let cfg = FxConfig::default();
    let fx = FxMatrix::encode(n, k, &x, &cfg).unwrap();
    let fy = FxMatrix::encode(k, m, &y, &cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let (xa, xb) = share(&fx, TAG, &mut rng);
    let (ya, yb) = share(&fy, TAG, &mut rng);
    let (ra, rb) = run_pair(
        seed,
        None,
        move |p, l| p.shared_matmul(l, &xa.payload, &ya.payload).unwrap(),
        move |p, l| p.shared_matmul(l, &xb.payload, &yb.payload).unwrap(),
    );
    decode_pair(&ra, &rb)
}

#[test]
fn shared_matmul_zero_operand() {
    let got = shared_product(1, vec![0.0; 6], vec![0.7, -1.2, 3.0, 0.5, 2.0, -0.25], 2, 3, 2);
    assert!(got.iter().all(|&v| v == 0.0), "{got:?}");
}

#[test]
fn shared_matmul_scalar() {
    let got = shared_product(2, vec![2.0], vec![3.0], 1, 1, 1);
    assert!((got[0] - 6.0).abs() <= 2f64.powi(-15));
}

#[test]
fn shared_matmul_random_matches_real() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for trial in 0..50 {
        let x = uniform(8, 4, -1.0, 1.0, &mut rng);
        let y = uniform(4, 3, -1.0, 1.0, &mut rng);
        let got = shared_product(100 + trial, x.clone(), y.clone(), 8, 4, 3);
        for (g, w) in got.iter().zip(real_matmul(&x, &y, 8, 4, 3)) {
            assert!((g - w).abs() <= 8.0 * 2f64.powi(-15), "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn shared_matmul_uses_two_rounds() {
    let tap = Tap::new();
    let m = FxMatrix::zeros(3, 3);
    let (m1, m2) = (m.clone(), m);
    run_pair(
        4,
        Some(tap.clone()),
        move |p, l| p.shared_matmul(l, &m1, &m1).unwrap(),
        move |p, l| p.shared_matmul(l, &m2, &m2).unwrap(),
    );
    // One E and one F frame from each side.
    assert_eq!(tap.len(), 4);
}

#[test]
fn triple_reuse_is_rejected() {
    let seed = SeedTree::new(5).child("explicit");
    let dims = TripleDims::new(1, 1, 1);
    let ta = SeededDealer::new(seed).issue(RoleId::HolderA, dims).unwrap();
    let tb = SeededDealer::new(seed).issue(RoleId::HolderB, dims).unwrap();
    let z = FxMatrix::zeros(1, 1);
    let (za, zb) = (z.clone(), z);
    let (ra, rb) = run_pair(
        5,
        None,
        move |p, l| {
            p.shared_matmul_with(l, &za, &za, ta.clone()).unwrap();
            p.shared_matmul_with(l, &za, &za, ta)
        },
        move |p, l| {
            p.shared_matmul_with(l, &zb, &zb, tb.clone()).unwrap();
            p.shared_matmul_with(l, &zb, &zb, tb)
        },
    );
    assert!(matches!(ra, Err(Error::TripleReuse { id: 0 })));
    assert!(matches!(rb, Err(Error::TripleReuse { id: 0 })));
}

struct Instance {
    xa: Vec<f64>,
    ta: Vec<f64>,
    xb: Vec<f64>,
    tb: Vec<f64>,
    n: usize,
    da: usize,
    db: usize,
    h: usize,
}

impl Instance {
    fn random(rng: &mut impl Rng, n: usize, da: usize, db: usize, h: usize) -> Self {
        Instance {
            xa: uniform(n, da, -1.0, 1.0, rng),
            ta: uniform(da, h, -1.0, 1.0, rng),
            xb: uniform(n, db, -1.0, 1.0, rng),
            tb: uniform(db, h, -1.0, 1.0, rng),
            n,
            da,
            db,
            h,
        }
    }

    fn plaintext(&self) -> Vec<f64> {
        let a = real_matmul(&self.xa, &self.ta, self.n, self.da, self.h);
        let b = real_matmul(&self.xb, &self.tb, self.n, self.db, self.h);
        a.iter().zip(&b).map(|(p, q)| p + q).collect()
    }

    fn run(&self, seed: u64, tap: Option<Tap>) -> (ShareMatrix, ShareMatrix) {
        let cfg = FxConfig::default();
        let xa = FxMatrix::encode(self.n, self.da, &self.xa, &cfg).unwrap();
        let ta = FxMatrix::encode(self.da, self.h, &self.ta, &cfg).unwrap();
        let xb = FxMatrix::encode(self.n, self.db, &self.xb, &cfg).unwrap();
        let tb = FxMatrix::encode(self.db, self.h, &self.tb, &cfg).unwrap();
        let (ra, rb) = run_pair(
            seed,
            tap,
            move |p, l| p.secure_first_layer(l, &xa, &ta),
            move |p, l| p.secure_first_layer(l, &xb, &tb),
        );
        (ra.unwrap(), rb.unwrap())
    }
}

#[test]
fn first_layer_zero_weights() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut inst = Instance::random(&mut rng, 5, 3, 4, 2);
    inst.ta = vec![0.0; 6];
    inst.tb = vec![0.0; 8];
    let (a, b) = inst.run(8, None);
    assert!(decode_pair(&a, &b).iter().all(|&v| v == 0.0));
}

#[test]
fn first_layer_matches_plaintext() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for trial in 0..30 {
        let inst = Instance::random(&mut rng, 4, 3, 3, 2);
        let (a, b) = inst.run(trial, None);
        for (g, w) in decode_pair(&a, &b).iter().zip(inst.plaintext()) {
            assert!((g - w).abs() <= 6.0 * 2f64.powi(-15), "{g} vs {w}");
        }
    }
}

#[test]
fn first_layer_equals_local_block_sum() {
    // The concatenated protocol and the cheap variant (each holder multiplies
    // its own block) agree up to fixed-point rounding.
    let cfg = FxConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let inst = Instance::random(&mut rng, 6, 4, 2, 3);
    let (a, b) = inst.run(10, None);
    let enc = |v: &[f64], r, c| FxMatrix::encode(r, c, v, &cfg).unwrap();
    let cheap = p2n2::fx_matmul_trunc(&enc(&inst.xa, 6, 4), &enc(&inst.ta, 4, 3), &cfg)
        .unwrap()
        .add(&p2n2::fx_matmul_trunc(&enc(&inst.xb, 6, 2), &enc(&inst.tb, 2, 3), &cfg).unwrap())
        .unwrap()
        .decode(&cfg);
    for (g, w) in decode_pair(&a, &b).iter().zip(cheap) {
        assert!((g - w).abs() <= 3.0 * cfg.ulp());
    }
}

#[test]
fn first_layer_rejects_batch_mismatch() {
    let cfg = FxConfig::default();
    let (ra, rb) = run_pair(
        11,
        None,
        move |p, l| p.secure_first_layer(l, &FxMatrix::zeros(3, 2), &FxMatrix::zeros(2, 2)),
        move |p, l| p.secure_first_layer(l, &FxMatrix::zeros(4, 2), &FxMatrix::zeros(2, 2)),
    );
    let _ = cfg;
    assert!(matches!(ra, Err(Error::Shape { .. })));
    assert!(matches!(rb, Err(Error::Shape { .. })));
}

#[test]
fn first_layer_round_count_is_constant() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut counts = Vec::new();
    for n in [1, 4, 32] {
        let tap = Tap::new();
        Instance::random(&mut rng, n, 3, 2, 2).run(12, Some(tap.clone()));
        counts.push(tap.len());
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

/// Element-level view of every matrix one holder sent.
fn sent_words(tap: &Tap, from: RoleId) -> Vec<Vec<u64>> {
    tap.entries()
        .into_iter()
        .filter(|e| e.from == from)
        .map(|e| {
            e.frame.payload[9..]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect()
}

#[test]
fn first_layer_transcript_is_masked() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let inst = Instance::random(&mut rng, 8, 4, 4, 3);
    let t1 = Tap::new();
    let t2 = Tap::new();
    inst.run(100, Some(t1.clone()));
    inst.run(200, Some(t2.clone()));
    let cfg = FxConfig::default();
    let plain: Vec<u64> = [&inst.xa, &inst.ta, &inst.xb, &inst.tb]
        .iter()
        .flat_map(|v| v.iter().map(|&x| cfg.encode(x).unwrap().0))
        .collect();
    for from in [RoleId::HolderA, RoleId::HolderB] {
        let (w1, w2) = (sent_words(&t1, from), sent_words(&t2, from));
        assert_eq!(w1.len(), w2.len());
        let mut same = 0usize;
        let mut total = 0usize;
        let mut top = 0usize;
        for (a, b) in w1.iter().zip(&w2) {
            for (x, y) in a.iter().zip(b) {
                total += 1;
                same += (x == y) as usize;
                top += (x >> 63) as usize;
                assert!(!plain.contains(x), "plaintext encoding on the wire");
            }
        }
        assert_eq!(same, 0, "{from}: {same}/{total} elements unchanged under fresh masks");
        let p = top as f64 / total as f64;
        let sigma = (0.25 / total as f64).sqrt();
        assert!((p - 0.5).abs() < 5.0 * sigma, "{from}: top-bit frequency {p}");
    }
}

#[test]
fn one_party_view_independent_of_partner_inputs() {
    // B's view with A's inputs swapped for different values is equally
    // distributed: compare the top-bit frequency of what B receives.
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let base = Instance::random(&mut rng, 16, 4, 4, 4);
    let mut other = Instance::random(&mut rng, 16, 4, 4, 4);
    other.xb = base.xb.clone();
    other.tb = base.tb.clone();
    let mut freqs = Vec::new();
    for inst in [&base, &other] {
        let mut ones = 0usize;
        let mut total = 0usize;
        for s in 0..20 {
            let tap = Tap::new();
            inst.run(1000 + s, Some(tap.clone()));
            for w in sent_words(&tap, RoleId::HolderA).concat() {
                ones += (w >> 63) as usize;
                total += 1;
            }
        }
        freqs.push((ones as f64 / total as f64, total));
    }
    let (p1, n1) = freqs[0];
    let (p2, n2) = freqs[1];
    let se = (0.25 / n1 as f64 + 0.25 / n2 as f64).sqrt();
    assert!((p1 - p2).abs() < 5.0 * se, "{p1} vs {p2}");
}
