//! Two-party additive secret sharing of fixed-point matrices.
//!
//! A matrix `M` is split as `M = M_A + M_B` in `Z_{2^64}` with `M_A` uniform.
//! Products of shared matrices use Beaver triples `(U, V, W = U·V)` issued by a
//! [`TripleProvider`]. `W` is kept at double scale, so every product term of a
//! protocol stays at scale `2f` until the final sum is truncated once per share.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::ring::{FxConfig, FxMatrix, RingElem};
use crate::role::RoleId;
use crate::seed::SeedTree;
use crate::transport::{Link, MessageKind};

/// Binds shares to one protocol session.
pub type SessionTag = [u8; 16];

#[derive(Debug, Clone, PartialEq)]
pub struct ShareMatrix {
    pub party: RoleId,
    pub payload: FxMatrix,
    pub tag: SessionTag,
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl RngCore) -> FxMatrix {
    let data = (0..rows * cols).map(|_| RingElem(rng.next_u64())).collect();
    FxMatrix::from_raw(rows, cols, data).expect("length matches shape")
}

/// Splits `m` into a uniform share for holder A and the complement for holder B.
pub fn share(m: &FxMatrix, tag: SessionTag, rng: &mut impl RngCore) -> (ShareMatrix, ShareMatrix) {
    let a = random_matrix(m.rows(), m.cols(), rng);
    let b = m.sub(&a).expect("same shape");
    (
        ShareMatrix {
            party: RoleId::HolderA,
            payload: a,
            tag,
        },
        ShareMatrix {
            party: RoleId::HolderB,
            payload: b,
            tag,
        },
    )
}

pub fn reconstruct(a: &ShareMatrix, b: &ShareMatrix) -> Result<FxMatrix> {
    if !a.party.is_holder() || !b.party.is_holder() || a.party == b.party {
        return Err(Error::Protocol(format!(
            "reconstruct needs one share from each holder, got {} and {}",
            a.party, b.party
        )));
    }
    if a.tag != b.tag {
        return Err(Error::Protocol(format!(
            "session tag mismatch: {} vs {}",
            hex::encode(a.tag),
            hex::encode(b.tag)
        )));
    }
    if a.payload.shape() != b.payload.shape() {
        return Err(Error::Protocol(format!(
            "share shapes differ: {:?} vs {:?}",
            a.payload.shape(),
            b.payload.shape()
        )));
    }
    a.payload.add(&b.payload)
}

/// Share-local truncation. Holder A shifts its share; holder B shifts the
/// negation of its share and negates back, so both shares move toward zero
/// and the reconstructed value is off by at most one unit (with overwhelming
/// probability when the plaintext is small against the ring).
pub fn truncate_share(party: RoleId, m: &FxMatrix, cfg: &FxConfig) -> FxMatrix {
    match party {
        RoleId::HolderA => m.truncate(cfg),
        _ => m.neg().truncate(cfg).neg(),
    }
}

/// Shape `(m, k, n)` of a triple for an `m×k` by `k×n` product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripleDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl TripleDims {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        TripleDims { m, k, n }
    }
}

/// One party's share of a Beaver triple. `w` is at scale `2f`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleShare {
    pub id: u64,
    pub party: RoleId,
    pub dims: TripleDims,
    pub u: FxMatrix,
    pub v: FxMatrix,
    pub w: FxMatrix,
}

/// Source of preprocessed multiplication material.
pub trait TripleProvider: Send {
    fn issue(&mut self, party: RoleId, dims: TripleDims) -> Result<TripleShare>;
    fn issued(&self) -> u64;
}

fn deal(root: &SeedTree, id: u64, dims: TripleDims) -> [TripleShare; 2] {
    let mut rng = root.child_idx("triple", id).rng();
    let u = random_matrix(dims.m, dims.k, &mut rng);
    let v = random_matrix(dims.k, dims.n, &mut rng);
    let w = u.matmul_raw(&v).expect("dims agree");
    let ua = random_matrix(dims.m, dims.k, &mut rng);
    let va = random_matrix(dims.k, dims.n, &mut rng);
    let wa = random_matrix(dims.m, dims.n, &mut rng);
    let b = TripleShare {
        id,
        party: RoleId::HolderB,
        dims,
        u: u.sub(&ua).unwrap(),
        v: v.sub(&va).unwrap(),
        w: w.sub(&wa).unwrap(),
    };
    let a = TripleShare {
        id,
        party: RoleId::HolderA,
        dims,
        u: ua,
        v: va,
        w: wa,
    };
    [a, b]
}

fn holder_slot(party: RoleId) -> Result<usize> {
    match party {
        RoleId::HolderA => Ok(0),
        RoleId::HolderB => Ok(1),
        RoleId::Server => Err(Error::Protocol("the server takes no part in sharing".into())),
    }
}

/// Deterministic trusted dealer. Both holders run one with the same seed and
/// request triples in the same order; each keeps only its own share.
#[derive(Debug, Clone)]
pub struct SeededDealer {
    root: SeedTree,
    next: u64,
    budget: Option<u64>,
}

impl SeededDealer {
    pub fn new(seed: SeedTree) -> Self {
        SeededDealer {
            root: seed,
            next: 0,
            budget: None,
        }
    }

    /// Caps the number of triples this dealer will issue.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }
}

impl TripleProvider for SeededDealer {
    fn issue(&mut self, party: RoleId, dims: TripleDims) -> Result<TripleShare> {
        let slot = holder_slot(party)?;
        if self.budget.is_some_and(|b| self.next >= b) {
            return Err(Error::Exhausted(format!("dealer budget of {} triples used", self.next)));
        }
        let id = self.next;
        self.next += 1;
        let [a, b] = deal(&self.root, id, dims);
        Ok(if slot == 0 { a } else { b })
    }

    fn issued(&self) -> u64 {
        self.next
    }
}

#[derive(Debug)]
struct SharedState {
    root: SeedTree,
    next: [u64; 2],
    pending: HashMap<u64, TripleShare>,
    budget: Option<u64>,
}

/// In-process dealer that builds each triple once and hands the other share
/// to the second holder. Issues exactly the triples a [`SeededDealer`] with the
/// same seed would.
#[derive(Debug, Clone)]
pub struct SharedDealer {
    state: Arc<Mutex<SharedState>>,
    party: RoleId,
}

impl SharedDealer {
    pub fn pair(seed: SeedTree, budget: Option<u64>) -> (SharedDealer, SharedDealer) {
        let state = Arc::new(Mutex::new(SharedState {
            root: seed,
            next: [0, 0],
            pending: HashMap::new(),
            budget,
        }));
        (
            SharedDealer {
                state: Arc::clone(&state),
                party: RoleId::HolderA,
            },
            SharedDealer {
                state,
                party: RoleId::HolderB,
            },
        )
    }
}

impl TripleProvider for SharedDealer {
    fn issue(&mut self, party: RoleId, dims: TripleDims) -> Result<TripleShare> {
        if party != self.party {
            return Err(Error::Protocol(format!(
                "dealer handle of {} asked for a {party} share",
                self.party
            )));
        }
        let slot = holder_slot(party)?;
        let mut st = self.state.lock().unwrap();
        let id = st.next[slot];
        if st.budget.is_some_and(|b| id >= b) {
            return Err(Error::Exhausted(format!("dealer budget of {id} triples used")));
        }
        st.next[slot] += 1;
        if let Some(t) = st.pending.remove(&id) {
            if t.dims != dims {
                return Err(Error::Protocol(format!(
                    "holders disagree on triple #{id}: {:?} vs {:?}",
                    t.dims, dims
                )));
            }
            return Ok(t);
        }
        let [a, b] = deal(&st.root, id, dims);
        let (mine, theirs) = if slot == 0 { (a, b) } else { (b, a) };
        st.pending.insert(id, theirs);
        Ok(mine)
    }

    fn issued(&self) -> u64 {
        let slot = holder_slot(self.party).unwrap();
        self.state.lock().unwrap().next[slot]
    }
}

/// One-time-use ledger of consumed triple ids.
#[derive(Debug, Default, Clone)]
pub struct TripleLedger {
    consumed: HashSet<u64>,
}

impl TripleLedger {
    pub fn consume(&mut self, t: &TripleShare) -> Result<()> {
        if !self.consumed.insert(t.id) {
            return Err(Error::TripleReuse { id: t.id });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.consumed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consumed.is_empty()
    }
}

/// A holder's side of the two-party computation: its triple source, the
/// consumed-triple ledger and the stream its own share masks are drawn from.
pub struct MpcParty {
    role: RoleId,
    cfg: FxConfig,
    tag: SessionTag,
    provider: Box<dyn TripleProvider>,
    ledger: TripleLedger,
    rng: ChaCha20Rng,
}

impl MpcParty {
    pub fn new(
        role: RoleId,
        cfg: FxConfig,
        tag: SessionTag,
        provider: Box<dyn TripleProvider>,
        masks: SeedTree,
    ) -> Result<Self> {
        holder_slot(role)?;
        Ok(MpcParty {
            role,
            cfg,
            tag,
            provider,
            ledger: TripleLedger::default(),
            rng: masks.rng(),
        })
    }

    pub fn role(&self) -> RoleId {
        self.role
    }

    pub fn cfg(&self) -> &FxConfig {
        &self.cfg
    }

    pub fn tag(&self) -> SessionTag {
        self.tag
    }

    pub fn triples_used(&self) -> usize {
        self.ledger.len()
    }

    fn wrap(&self, payload: FxMatrix) -> ShareMatrix {
        ShareMatrix {
            party: self.role,
            payload,
            tag: self.tag,
        }
    }

    /// Shares a private matrix: returns `(kept, sent)` where `kept` is this
    /// holder's share and `sent` is the partner's.
    pub fn share_own(&mut self, m: &FxMatrix) -> (FxMatrix, FxMatrix) {
        let (a, b) = share(m, self.tag, &mut self.rng);
        match self.role {
            RoleId::HolderA => (a.payload, b.payload),
            _ => (b.payload, a.payload),
        }
    }

    /// Share-local truncation for this holder.
    pub fn truncate(&self, m: &FxMatrix) -> FxMatrix {
        truncate_share(self.role, m, &self.cfg)
    }

    pub fn issue(&mut self, dims: TripleDims) -> Result<TripleShare> {
        self.provider.issue(self.role, dims)
    }

    /// Beaver products of shared pairs with caller-supplied triples. All
    /// products open their masked differences together: one round for the
    /// left operands, one for the right. Results are raw (scale `2f`).
    pub fn beaver_raw(
        &mut self,
        link: &mut Link,
        items: &[(&FxMatrix, &FxMatrix)],
        triples: Vec<TripleShare>,
    ) -> Result<Vec<FxMatrix>> {
        if items.len() != triples.len() {
            return Err(Error::Protocol(format!(
                "{} products but {} triples",
                items.len(),
                triples.len()
            )));
        }
        for ((x, y), t) in items.iter().zip(&triples) {
            if t.party != self.role {
                return Err(Error::Protocol(format!("triple #{} belongs to {}", t.id, t.party)));
            }
            let d = t.dims;
            if x.shape() != (d.m, d.k) || y.shape() != (d.k, d.n) {
                return Err(Error::shape(
                    "shared_matmul",
                    format!(
                        "{:?} x {:?} against triple ({}, {}, {})",
                        x.shape(),
                        y.shape(),
                        d.m,
                        d.k,
                        d.n
                    ),
                ));
            }
        }
        for t in &triples {
            self.ledger.consume(t)?;
        }
        let mut e_open = Vec::with_capacity(items.len());
        for ((x, _), t) in items.iter().zip(&triples) {
            let e = x.sub(&t.u)?;
            link.send_ring(MessageKind::ShareBlock, &e)?;
            e_open.push(e);
        }
        for e in e_open.iter_mut() {
            let theirs = link.recv_ring(MessageKind::ShareBlock)?;
            *e = e.add(&theirs).map_err(|_| Error::Protocol("opened E has the wrong shape".into()))?;
        }
        let mut f_open = Vec::with_capacity(items.len());
        for ((_, y), t) in items.iter().zip(&triples) {
            let f = y.sub(&t.v)?;
            link.send_ring(MessageKind::ShareBlock, &f)?;
            f_open.push(f);
        }
        for f in f_open.iter_mut() {
            let theirs = link.recv_ring(MessageKind::ShareBlock)?;
            *f = f.add(&theirs).map_err(|_| Error::Protocol("opened F has the wrong shape".into()))?;
        }
        let mut out = Vec::with_capacity(items.len());
        for ((t, e), f) in triples.iter().zip(&e_open).zip(&f_open) {
            let mut z = t.w.clone();
            z.add_assign(&e.matmul_raw(&t.v)?)?;
            z.add_assign(&t.u.matmul_raw(f)?)?;
            if self.role == RoleId::HolderA {
                z.add_assign(&e.matmul_raw(f)?)?;
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Beaver products with triples drawn from this party's provider.
    pub fn shared_matmul_raw(&mut self, link: &mut Link, items: &[(&FxMatrix, &FxMatrix)]) -> Result<Vec<FxMatrix>> {
        let triples = items
            .iter()
            .map(|(x, y)| self.issue(TripleDims::new(x.rows(), x.cols(), y.cols())))
            .collect::<Result<Vec<_>>>()?;
        self.beaver_raw(link, items, triples)
    }

    /// Shared product `X·Y` with an explicit triple, truncated back to scale `f`.
    pub fn shared_matmul_with(
        &mut self,
        link: &mut Link,
        x: &FxMatrix,
        y: &FxMatrix,
        triple: TripleShare,
    ) -> Result<ShareMatrix> {
        let z = self.beaver_raw(link, &[(x, y)], vec![triple])?.remove(0);
        Ok(self.wrap(self.truncate(&z)))
    }

    pub fn shared_matmul(&mut self, link: &mut Link, x: &FxMatrix, y: &FxMatrix) -> Result<ShareMatrix> {
        let t = self.issue(TripleDims::new(x.rows(), x.cols(), y.cols()))?;
        self.shared_matmul_with(link, x, y, t)
    }

    /// First hidden layer pre-activation `X_A·θ_A + X_B·θ_B` over shares.
    ///
    /// Both holders share their feature block and weight block, swap the
    /// designated halves, assemble `<X>_i = <X_A>_i | <X_B>_i` and
    /// `<θ>_i = <θ_A>_i ; <θ_B>_i`, add the local product `<X>_i·<θ>_i` to the
    /// two cross products `<X>_1·<θ>_2` and `<X>_2·<θ>_1` (Beaver), and
    /// truncate the sum once.
    pub fn secure_first_layer(&mut self, link: &mut Link, x_own: &FxMatrix, theta_own: &FxMatrix) -> Result<ShareMatrix> {
        if theta_own.rows() != x_own.cols() {
            return Err(Error::shape(
                "secure_first_layer",
                format!("features {:?} vs weights {:?}", x_own.shape(), theta_own.shape()),
            ));
        }
        let (x_keep, x_send) = self.share_own(x_own);
        let (t_keep, t_send) = self.share_own(theta_own);
        link.send_ring(MessageKind::ShareBlock, &x_send)?;
        link.send_ring(MessageKind::ShareBlock, &t_send)?;
        let x_other = link.recv_ring(MessageKind::ShareBlock)?;
        let t_other = link.recv_ring(MessageKind::ShareBlock)?;
        if x_other.rows() != x_own.rows() {
            return Err(Error::shape(
                "secure_first_layer",
                format!("batch sizes differ: {} vs {}", x_own.rows(), x_other.rows()),
            ));
        }
        if t_other.cols() != theta_own.cols() || t_other.rows() != x_other.cols() {
            return Err(Error::shape(
                "secure_first_layer",
                format!(
                    "partner blocks {:?} / {:?} do not fit ours {:?} / {:?}",
                    x_other.shape(),
                    t_other.shape(),
                    x_own.shape(),
                    theta_own.shape()
                ),
            ));
        }
        // A's blocks come first in the concatenation on both sides.
        let (x_i, t_i) = match self.role {
            RoleId::HolderA => (x_keep.hconcat(&x_other)?, t_keep.vconcat(&t_other)?),
            _ => (x_other.hconcat(&x_keep)?, t_other.vconcat(&t_keep)?),
        };
        let local = x_i.matmul_raw(&t_i)?;
        let zx = FxMatrix::zeros(x_i.rows(), x_i.cols());
        let zt = FxMatrix::zeros(t_i.rows(), t_i.cols());
        let items: [(&FxMatrix, &FxMatrix); 2] = match self.role {
            RoleId::HolderA => [(&x_i, &zt), (&zx, &t_i)],
            _ => [(&zx, &t_i), (&x_i, &zt)],
        };
        let cross = self.shared_matmul_raw(link, &items)?;
        let mut z = local;
        for c in &cross {
            z.add_assign(c)?;
        }
        Ok(self.wrap(self.truncate(&z)))
    }

    /// Raw shares of `P·S` where `P` (`dims.0 × dims.1`) is private to `owner`
    /// and `S` is shared.
    pub fn private_times_shared(
        &mut self,
        link: &mut Link,
        owner: RoleId,
        private: Option<&FxMatrix>,
        dims: (usize, usize),
        s_share: &FxMatrix,
    ) -> Result<FxMatrix> {
        let zero_p = FxMatrix::zeros(dims.0, dims.1);
        let zero_s = FxMatrix::zeros(s_share.rows(), s_share.cols());
        if self.role == owner {
            let p = private.ok_or_else(|| Error::Protocol("owner must supply its matrix".into()))?;
            if p.shape() != dims {
                return Err(Error::shape("private_times_shared", format!("{:?} vs {:?}", p.shape(), dims)));
            }
            let mut z = self.shared_matmul_raw(link, &[(p, &zero_s)])?.remove(0);
            z.add_assign(&p.matmul_raw(s_share)?)?;
            Ok(z)
        } else {
            Ok(self.shared_matmul_raw(link, &[(&zero_p, s_share)])?.remove(0))
        }
    }

    /// Raw shares of `H·W` where `H` is shared and `W` (`dims.0 × dims.1`) is
    /// private to `owner`.
    pub fn shared_times_private(
        &mut self,
        link: &mut Link,
        owner: RoleId,
        h_share: &FxMatrix,
        private: Option<&FxMatrix>,
        dims: (usize, usize),
    ) -> Result<FxMatrix> {
        let zero_h = FxMatrix::zeros(h_share.rows(), h_share.cols());
        let zero_w = FxMatrix::zeros(dims.0, dims.1);
        if self.role == owner {
            let w = private.ok_or_else(|| Error::Protocol("owner must supply its matrix".into()))?;
            if w.shape() != dims {
                return Err(Error::shape("shared_times_private", format!("{:?} vs {:?}", w.shape(), dims)));
            }
            let mut z = self.shared_matmul_raw(link, &[(&zero_h, w)])?.remove(0);
            z.add_assign(&h_share.matmul_raw(w)?)?;
            Ok(z)
        } else {
            Ok(self.shared_matmul_raw(link, &[(h_share, &zero_w)])?.remove(0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tag() -> SessionTag {
        [5; 16]
    }

    #[test]
    fn zero_shares_are_negations() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (a, b) = share(&FxMatrix::zeros(2, 2), tag(), &mut rng);
        assert_eq!(a.payload.neg(), b.payload);
    }

    #[test]
    fn reconstruct_round_trip_and_guards() {
        let cfg = FxConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let m = FxMatrix::encode(1, 1, &[1.5], &cfg).unwrap();
        let (a, b) = share(&m, tag(), &mut rng);
        assert_eq!(reconstruct(&a, &b).unwrap(), m);
        assert_eq!(reconstruct(&b, &a).unwrap(), m);
        let mut other = b.clone();
        other.tag = [6; 16];
        assert!(matches!(reconstruct(&a, &other), Err(Error::Protocol(_))));
        assert!(reconstruct(&a, &a).is_err());
    }

    #[test]
    fn truncation_of_shares() {
        let cfg = FxConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for &x in &[0.0, 1.0, -1.0, 3.25, -7.5, 1000.0] {
            let raw = FxMatrix::from_raw(1, 1, vec![RingElem((cfg.encode(x).unwrap().signed() << 16) as u64)]).unwrap();
            for _ in 0..200 {
                let (a, b) = share(&raw, tag(), &mut rng);
                let ta = truncate_share(RoleId::HolderA, &a.payload, &cfg);
                let tb = truncate_share(RoleId::HolderB, &b.payload, &cfg);
                let got = cfg.decode(ta.add(&tb).unwrap().get(0, 0));
                assert!((got - x).abs() <= cfg.ulp(), "{x} -> {got}");
            }
        }
    }

    #[test]
    fn dealers_agree() {
        let seed = SeedTree::new(9).child("dealer");
        let dims = TripleDims::new(2, 3, 4);
        let (mut sa, mut sb) = SharedDealer::pair(seed, None);
        let mut da = SeededDealer::new(seed);
        let mut db = SeededDealer::new(seed);
        for _ in 0..3 {
            let (ta, tb) = (da.issue(RoleId::HolderA, dims).unwrap(), db.issue(RoleId::HolderB, dims).unwrap());
            // Order of requests differs between the two shared handles.
            let ub = sb.issue(RoleId::HolderB, dims).unwrap();
            let ua = sa.issue(RoleId::HolderA, dims).unwrap();
            assert_eq!(ta, ua);
            assert_eq!(tb, ub);
            let u = ta.u.add(&tb.u).unwrap();
            let v = ta.v.add(&tb.v).unwrap();
            assert_eq!(ta.w.add(&tb.w).unwrap(), u.matmul_raw(&v).unwrap());
        }
        assert_eq!(da.issued(), 3);
        assert!(sa.issue(RoleId::HolderB, dims).is_err());
    }

    #[test]
    fn budget_and_reuse() {
        let mut d = SeededDealer::new(SeedTree::new(1)).with_budget(1);
        let dims = TripleDims::new(1, 1, 1);
        let t = d.issue(RoleId::HolderA, dims).unwrap();
        assert!(matches!(d.issue(RoleId::HolderA, dims), Err(Error::Exhausted(_))));
        let mut ledger = TripleLedger::default();
        ledger.consume(&t).unwrap();
        assert!(matches!(ledger.consume(&t), Err(Error::TripleReuse { id: 0 })));
        assert!(d.issue(RoleId::Server, dims).is_err());
    }
}
