//! Information-form fusion and synchronous consensus rounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Belief, Stage};
use crate::linalg::{invert_spd, Matrix, Vector};

/// Who hears whom. Every neighbourhood contains its own node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    #[default]
    Full,
    Ring,
    Star,
    Line,
    Isolated,
    Custom,
}

impl Topology {
    /// Zero-based adjacency lists; each node is added to its own list if absent.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::config("topology", "needs at least one node"));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            if let Some(bad) = list.iter().find(|&&j| j >= n) {
                return Err(Error::config(
                    "topology",
                    format!("node {} lists neighbour {} outside 1..={n}", i + 1, bad + 1),
                ));
            }
            list.push(i);
            list.sort_unstable();
            list.dedup();
        }
        Ok(Topology { neighbors })
    }

    pub fn full(n: usize) -> Self {
        Topology {
            neighbors: (0..n).map(|_| (0..n).collect()).collect(),
        }
    }

    pub fn isolated(n: usize) -> Self {
        Topology {
            neighbors: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn ring(n: usize) -> Self {
        let lists = (0..n)
            .map(|i| vec![(i + n - 1) % n, (i + 1) % n])
            .collect();
        Self::from_neighbors(lists).expect("ring indices in range")
    }

    pub fn line(n: usize) -> Self {
        let lists = (0..n)
            .map(|i| {
                let mut l = Vec::new();
                if i > 0 {
                    l.push(i - 1);
                }
                if i + 1 < n {
                    l.push(i + 1);
                }
                l
            })
            .collect();
        Self::from_neighbors(lists).expect("line indices in range")
    }

    /// Node 0 is the hub.
    pub fn star(n: usize) -> Self {
        let lists = (0..n)
            .map(|i| if i == 0 { (1..n).collect() } else { vec![0] })
            .collect();
        Self::from_neighbors(lists).expect("star indices in range")
    }

    pub fn build(kind: TopologyKind, n: usize, custom: Option<&[Vec<usize>]>) -> Result<Self> {
        Ok(match kind {
            TopologyKind::Full => Self::full(n),
            TopologyKind::Ring => Self::ring(n),
            TopologyKind::Star => Self::star(n),
            TopologyKind::Line => Self::line(n),
            TopologyKind::Isolated => Self::isolated(n),
            TopologyKind::Custom => {
                let lists = custom.ok_or_else(|| {
                    Error::config("topology.adjacency", "required when kind = \"custom\"")
                })?;
                if lists.len() != n {
                    return Err(Error::config(
                        "topology.adjacency",
                        format!("has {} lists for {n} nodes", lists.len()),
                    ));
                }
                Self::from_neighbors(lists.to_vec())?
            }
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `Σ_i |N_i|`, the number of messages one consensus round delivers.
    pub fn messages_per_round(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionScale {
    /// Plain information sum.
    #[default]
    Sum,
    /// Information sum divided by the neighbourhood size.
    Average,
}

/// Precision `W = P⁻¹` and information vector `z = W x̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMessage {
    pub precision: Matrix,
    pub info: Vector,
}

pub fn info_contribution(belief: &Belief) -> Result<InfoMessage> {
    let precision = invert_spd(&belief.cov)?;
    let info = precision.mul_vec(&belief.mean)?;
    Ok(InfoMessage { precision, info })
}

/// Sums the messages and converts back to a moment-form belief at `time`.
pub fn fuse(messages: &[&InfoMessage], scale: FusionScale, time: i64) -> Result<Belief> {
    let first = messages
        .first()
        .ok_or_else(|| Error::LengthMismatch("fuse needs at least one message".into()))?;
    let n = first.info.dim();
    let mut w = Matrix::zeros(n, n);
    let mut z = Vector::zeros(n);
    for m in messages {
        if m.precision.shape() != (n, n) || m.info.dim() != n {
            return Err(Error::DimensionMismatch("inconsistent message dimensions".into()));
        }
        w = w.try_add(&m.precision)?;
        z = &z + &m.info;
    }
    if scale == FusionScale::Average {
        let c = 1.0 / messages.len() as f64;
        w = w.scale(c);
        z = z.scale(c);
    }
    let cov = invert_spd(&w.symmetrize())?;
    let mean = cov.mul_vec(&z)?;
    if !mean.is_finite() {
        return Err(Error::NonFiniteState(format!("fused mean {mean:?}")));
    }
    Ok(Belief {
        mean,
        cov,
        stage: Stage::Fused,
        time,
    })
}

/// One synchronous exchange: node `i` fuses the messages of every `j ∈ N_i`.
///
/// Outputs depend only on the input snapshot.
pub fn consensus_round(beliefs: &[Belief], topo: &Topology, scale: FusionScale) -> Result<Vec<Belief>> {
    if beliefs.len() != topo.n_nodes() {
        return Err(Error::LengthMismatch(format!(
            "{} beliefs for a {}-node topology",
            beliefs.len(),
            topo.n_nodes()
        )));
    }
    if let Some(b) = beliefs.iter().find(|b| b.stage == Stage::Predicted) {
        return Err(Error::StageOrder {
            operation: "fusion",
            found: b.stage.to_string(),
        });
    }
    let messages = beliefs
        .iter()
        .map(info_contribution)
        .collect::<Result<Vec<_>>>()?;
    (0..beliefs.len())
        .map(|i| {
            let inbox: Vec<&InfoMessage> = topo.neighbors(i).iter().map(|&j| &messages[j]).collect();
            fuse(&inbox, scale, beliefs[i].time)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn belief(mean: [f64; 2], cov: Matrix) -> Belief {
        Belief::new(Vector::from(mean), cov, Stage::Updated, 3).unwrap()
    }

    fn random_belief(r: &mut impl Rng) -> Belief {
        let a: f64 = r.random_range(0.05..2.0);
        let d = r.random_range(0.05..2.0);
        let b = r.random_range(-0.8..0.8) * (a * d).sqrt();
        belief(
            [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)],
            Matrix::from_rows(&[&[a, b], &[b, d]]),
        )
    }

    #[test]
    fn info_contribution_examples() {
        let m = info_contribution(&belief([1.0, 2.0], Matrix::identity(2))).unwrap();
        assert_eq!(m.precision, Matrix::identity(2));
        assert_eq!(m.info, Vector::from([1.0, 2.0]));
        let m = info_contribution(&belief([2.0, 0.0], Matrix::identity(2).scale(0.5))).unwrap();
        assert_eq!(m.precision, Matrix::identity(2).scale(2.0));
        assert_eq!(m.info, Vector::from([4.0, 0.0]));
    }

    #[test]
    fn singular_covariance_is_not_spd() {
        let b = Belief {
            mean: Vector::zeros(2),
            cov: Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]),
            stage: Stage::Updated,
            time: 0,
        };
        assert!(matches!(info_contribution(&b), Err(Error::NotSpd(_))));
    }

    #[test]
    fn fuse_examples() {
        let x = belief([0.3, -0.2], Matrix::from_rows(&[&[0.4, 0.1], &[0.1, 0.2]]));
        let m = info_contribution(&x).unwrap();
        let single = fuse(&[&m], FusionScale::Sum, 3).unwrap();
        assert!(single.mean.max_abs_diff(&x.mean) < 1e-12);
        assert!(single.cov.max_abs_diff(&x.cov) < 1e-12);
        assert_eq!(single.stage, Stage::Fused);

        let double = fuse(&[&m, &m], FusionScale::Sum, 3).unwrap();
        assert!(double.mean.max_abs_diff(&x.mean) < 1e-12);
        assert!(double.cov.max_abs_diff(&x.cov.scale(0.5)) < 1e-12);
        assert_eq!(double.cov, single.cov.scale(0.5));

        let a = info_contribution(&belief([0.0, 0.0], Matrix::identity(2))).unwrap();
        let b = info_contribution(&belief([2.0, 0.0], Matrix::identity(2))).unwrap();
        let f = fuse(&[&a, &b], FusionScale::Sum, 3).unwrap();
        assert_eq!(f.mean, Vector::from([1.0, 0.0]));
        assert_eq!(f.cov, Matrix::identity(2).scale(0.5));

        let avg = fuse(&[&a, &b], FusionScale::Average, 3).unwrap();
        assert_eq!(avg.mean, Vector::from([1.0, 0.0]));
        assert_eq!(avg.cov, Matrix::identity(2));

        assert!(fuse(&[], FusionScale::Sum, 0).is_err());
    }

    #[test]
    fn isolated_nodes_unchanged() {
        let mut r = rng::stream(1, "iso", 0);
        let beliefs: Vec<Belief> = (0..4).map(|_| random_belief(&mut r)).collect();
        let out = consensus_round(&beliefs, &Topology::isolated(4), FusionScale::Sum).unwrap();
        for (a, b) in beliefs.iter().zip(&out) {
            assert!(a.mean.max_abs_diff(&b.mean) < 1e-12);
            assert!(a.cov.max_abs_diff(&b.cov) < 1e-12);
        }
    }

    #[test]
    fn fully_connected_identical_beliefs() {
        let x = belief([0.5, 1.5], Matrix::from_rows(&[&[0.5, 0.2], &[0.2, 0.3]]));
        let out = consensus_round(&vec![x.clone(); 4], &Topology::full(4), FusionScale::Sum).unwrap();
        for b in out {
            assert!(b.mean.max_abs_diff(&x.mean) < 1e-12);
            assert!(b.cov.max_abs_diff(&x.cov.scale(0.25)) < 1e-12);
        }
    }

    #[test]
    fn equal_covariance_fusion_is_arithmetic_mean() {
        let mut r = rng::stream(2, "eq", 0);
        let cov = Matrix::from_rows(&[&[0.3, 0.05], &[0.05, 0.6]]);
        let beliefs: Vec<Belief> = (0..4)
            .map(|_| belief([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)], cov.clone()))
            .collect();
        let avg = beliefs
            .iter()
            .fold(Vector::zeros(2), |acc, b| &acc + &b.mean)
            .scale(0.25);
        for b in consensus_round(&beliefs, &Topology::full(4), FusionScale::Sum).unwrap() {
            assert!(b.mean.max_abs_diff(&avg) < 1e-10);
        }
    }

    #[test]
    fn equal_covariance_consensus_contracts_on_a_ring() {
        // Ring of 6, where one round cannot reach everyone.
        let mut r = rng::stream(3, "ring", 0);
        let cov = Matrix::identity(2).scale(0.2);
        let mut beliefs: Vec<Belief> = (0..6)
            .map(|_| belief([r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)], cov.clone()))
            .collect();
        let global = beliefs
            .iter()
            .fold(Vector::zeros(2), |acc, b| &acc + &b.mean)
            .scale(1.0 / 6.0);
        let truth_error = |bs: &[Belief]| bs.iter().map(|b| b.mean.max_abs_diff(&global)).fold(0.0, f64::max);
        let spread = |bs: &[Belief]| {
            let mut m: f64 = 0.0;
            for a in bs {
                for b in bs {
                    m = m.max((&a.mean - &b.mean).norm());
                }
            }
            m
        };
        let topo = Topology::ring(6);
        for _ in 0..15 {
            let next = consensus_round(&beliefs, &topo, FusionScale::Average).unwrap();
            assert!(spread(&next) < spread(&beliefs));
            // Convex combination: the largest deviation from any fixed point cannot grow.
            assert!(truth_error(&next) <= truth_error(&beliefs) + 1e-12);
            beliefs = next;
        }
        assert!(spread(&beliefs) < 0.05);
    }

    #[test]
    fn topologies() {
        assert_eq!(Topology::full(4).messages_per_round(), 16);
        assert_eq!(Topology::ring(4).messages_per_round(), 12);
        assert_eq!(Topology::line(4).messages_per_round(), 10);
        assert_eq!(Topology::star(4).messages_per_round(), 10);
        assert_eq!(Topology::isolated(4).messages_per_round(), 4);
        let custom = Topology::from_neighbors(vec![vec![1], vec![], vec![0, 0]]).unwrap();
        assert_eq!(custom.neighbors(0), &[0, 1]);
        assert_eq!(custom.neighbors(1), &[1]);
        assert_eq!(custom.neighbors(2), &[0, 2]);
        assert!(Topology::from_neighbors(vec![vec![3]]).is_err());
        assert!(Topology::build(TopologyKind::Custom, 2, None).is_err());
    }

    #[test]
    fn predicted_beliefs_cannot_be_fused() {
        let mut b = belief([0.0, 0.0], Matrix::identity(2));
        b.stage = Stage::Predicted;
        assert!(matches!(
            consensus_round(&[b], &Topology::full(1), FusionScale::Sum),
            Err(Error::StageOrder { .. })
        ));
    }

    proptest! {
        #[test]
        fn fusion_is_permutation_invariant(seed in any::<u64>(), n in 1usize..6) {
            let mut r = rng::stream(seed, "perm", 0);
            let msgs: Vec<InfoMessage> = (0..n).map(|_| info_contribution(&random_belief(&mut r)).unwrap()).collect();
            let mut refs: Vec<&InfoMessage> = msgs.iter().collect();
            let a = fuse(&refs, FusionScale::Sum, 0).unwrap();
            refs.shuffle(&mut r);
            let b = fuse(&refs, FusionScale::Sum, 0).unwrap();
            prop_assert!(a.mean.max_abs_diff(&b.mean) < 1e-10);
            prop_assert!(a.cov.max_abs_diff(&b.cov) < 1e-10);
        }

        #[test]
        fn fused_precision_is_sum_of_precisions(seed in any::<u64>(), n in 1usize..6) {
            let mut r = rng::stream(seed, "prec", 0);
            let msgs: Vec<InfoMessage> = (0..n).map(|_| info_contribution(&random_belief(&mut r)).unwrap()).collect();
            let refs: Vec<&InfoMessage> = msgs.iter().collect();
            let fused = fuse(&refs, FusionScale::Sum, 0).unwrap();
            let total = msgs.iter().fold(Matrix::zeros(2, 2), |acc, m| &acc + &m.precision);
            let back = info_contribution(&fused).unwrap();
            prop_assert!(back.precision.max_abs_diff(&total) < 1e-10 * total.max_abs().max(1.0));
        }
    }
}
