//! Modality extrapolation.
//!
//! Mixup-style interpolation generalizes to multi-extrapolation `F̃ = W·F`
//! with an arbitrary real weight matrix. The weights are obtained as
//! minimum-norm least-squares transitions through the pseudo-inverse of the
//! pivot embeddings of the source dataset:
//!
//! ```text
//! cross-modal  W(b→c)  = F_c2 · F_b2⁺      x-mod  F̃_c1 = W(b→c) · F_b1
//! cross-data   W(2→1)  = F_b1 · F_b2⁺      x-data F̃_c1 = W(2→1) · F_c2
//! ```
//!
//! All of these are B×B instance-space transitions, so both datasets must
//! contribute the same number of rows to a batch.
//!
//! During training the pseudo-inverse is a stop-gradient constant; see
//! [`record_pseudo`].

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffnet::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_PINV_RTOL};
use crate::{DatasetId, ModalityId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionKind {
    CrossModal,
    CrossData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub kind: TransitionKind,
    pub w: Matrix,
    /// Modality (cross-modal) or dataset (cross-data) the transition leaves.
    pub source: String,
    pub destination: String,
    /// Built from a stop-gradient pseudo-inverse.
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoPath {
    XMod,
    XData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEmbeddings {
    pub path: PseudoPath,
    pub target: (DatasetId, ModalityId),
    pub values: Matrix,
}

/// Unconstrained real mixing weights (m×n).
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights(pub Matrix);

/// `λ·f1 + (1−λ)·f2`. λ outside [0, 1] extrapolates along the line.
pub fn interpolate(f1: &[f64], f2: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if f1.len() != f2.len() {
        return Err(Error::shape("interpolate", alloc::format!("{} vs {}", f1.len(), f2.len())));
    }
    Ok(f1.iter().zip(f2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// `W·F`: every output row is a weighted combination of the rows of `f`.
pub fn multi_extrapolate(w: &MixWeights, f: &Matrix) -> Result<Matrix> {
    w.0.matmul(f).map_err(|_| {
        Error::shape("multi_extrapolate", alloc::format!("weights {:?} vs features {:?}", w.0.shape(), f.shape()))
    })
}

fn check_same_batch(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            alloc::format!(
                "per-dataset batches must have equal rows and embedding width: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok(())
}

/// `W(b→c) = F_target_src · F_pivot_src⁺`, both from the source dataset.
pub fn cross_modal_transition(
    f_target_src: &Matrix,
    f_pivot_src: &Matrix,
    source: &ModalityId,
    destination: &ModalityId,
) -> Result<TransitionMatrix> {
    check_same_batch("cross_modal_transition", f_target_src, f_pivot_src)?;
    let p = linalg::pinv(f_pivot_src, DEFAULT_PINV_RTOL)?;
    Ok(TransitionMatrix {
        kind: TransitionKind::CrossModal,
        w: f_target_src.matmul(&p)?,
        source: source.0.clone(),
        destination: destination.0.clone(),
        frozen: true,
    })
}

/// `W(2→1) = F_pivot_dst · F_pivot_src⁺`.
pub fn cross_data_transition(
    f_pivot_dst: &Matrix,
    f_pivot_src: &Matrix,
    source: &DatasetId,
    destination: &DatasetId,
) -> Result<TransitionMatrix> {
    check_same_batch("cross_data_transition", f_pivot_dst, f_pivot_src)?;
    let p = linalg::pinv(f_pivot_src, DEFAULT_PINV_RTOL)?;
    Ok(TransitionMatrix {
        kind: TransitionKind::CrossData,
        w: f_pivot_dst.matmul(&p)?,
        source: source.0.clone(),
        destination: destination.0.clone(),
        frozen: true,
    })
}

/// X-mod pseudo embeddings `W(b→c) · F_pivot_dst`.
pub fn pseudo_embed_x_mod(
    trans: &TransitionMatrix,
    f_pivot_dst: &Matrix,
    target: (DatasetId, ModalityId),
) -> Result<PseudoEmbeddings> {
    if trans.kind != TransitionKind::CrossModal {
        return Err(Error::contract("pseudo_embed_x_mod", "needs a cross-modal transition"));
    }
    if trans.w.cols() != f_pivot_dst.rows() {
        return Err(Error::shape(
            "pseudo_embed_x_mod",
            alloc::format!("transition over {} rows applied to a batch of {}", trans.w.cols(), f_pivot_dst.rows()),
        ));
    }
    Ok(PseudoEmbeddings { path: PseudoPath::XMod, target, values: trans.w.matmul(f_pivot_dst)? })
}

/// X-data pseudo embeddings `W(2→1) · F_target_src`.
pub fn pseudo_embed_x_data(
    trans: &TransitionMatrix,
    f_target_src: &Matrix,
    target: (DatasetId, ModalityId),
) -> Result<PseudoEmbeddings> {
    if trans.kind != TransitionKind::CrossData {
        return Err(Error::contract("pseudo_embed_x_data", "needs a cross-data transition"));
    }
    if trans.w.cols() != f_target_src.rows() {
        return Err(Error::shape(
            "pseudo_embed_x_data",
            alloc::format!("transition over {} rows applied to a batch of {}", trans.w.cols(), f_target_src.rows()),
        ));
    }
    Ok(PseudoEmbeddings { path: PseudoPath::XData, target, values: trans.w.matmul(f_target_src)? })
}

/// Both pseudo-embedding paths for the target modality of the destination
/// dataset, given pivot embeddings in both datasets and the target modality
/// in the source dataset.
pub fn pseudo_pair(f_pivot_dst: &Matrix, f_pivot_src: &Matrix, f_target_src: &Matrix) -> Result<(Matrix, Matrix)> {
    check_same_batch("pseudo_pair", f_pivot_dst, f_pivot_src)?;
    check_same_batch("pseudo_pair", f_target_src, f_pivot_src)?;
    let p = linalg::pinv(f_pivot_src, DEFAULT_PINV_RTOL)?;
    let x_mod = f_target_src.matmul(&p)?.matmul(f_pivot_dst)?;
    let x_data = f_pivot_dst.matmul(&p)?.matmul(f_target_src)?;
    Ok((x_mod, x_data))
}

/// Three-dataset inputs. D1 holds only modality a; D2 holds (a, b); D3 holds
/// (b, c). The goal is modality c for D1.
#[derive(Debug, Clone, Copy)]
pub struct ChainInputs<'a> {
    pub f_a1: &'a Matrix,
    pub f_a2: &'a Matrix,
    pub f_b2: &'a Matrix,
    pub f_b3: &'a Matrix,
    pub f_c3: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainedPseudo {
    pub b1_x_mod: Matrix,
    pub b1_x_data: Matrix,
    pub c1_x_mod: Matrix,
    pub c1_x_data: Matrix,
}

/// Two-step extrapolation: first b for D1 through pivot a (D1←D2), then c
/// for D1 through the extrapolated b (D1←D3), using `F̃_b1` (x-data) as the
/// pivot of the second step.
pub fn chain_extrapolate(inp: ChainInputs<'_>) -> Result<ChainedPseudo> {
    let (b1_x_mod, b1_x_data) = pseudo_pair(inp.f_a1, inp.f_a2, inp.f_b2)?;
    let (c1_x_mod, c1_x_data) = pseudo_pair(&b1_x_data, inp.f_b3, inp.f_c3)?;
    Ok(ChainedPseudo { b1_x_mod, b1_x_data, c1_x_mod, c1_x_data })
}

/// Tape nodes for both pseudo-embedding paths. `F_pivot_src⁺` enters the
/// record as a frozen constant.
#[derive(Debug, Clone, Copy)]
pub struct PseudoNodes {
    pub pinv: NodeId,
    pub x_mod: NodeId,
    pub x_data: NodeId,
}

pub fn record_pseudo(tape: &mut Tape, pivot_dst: NodeId, pivot_src: NodeId, target_src: NodeId) -> Result<PseudoNodes> {
    check_same_batch("record_pseudo", tape.value(pivot_dst), tape.value(pivot_src))?;
    check_same_batch("record_pseudo", tape.value(target_src), tape.value(pivot_src))?;
    let pinv = tape.frozen_pinv(pivot_src, DEFAULT_PINV_RTOL)?;
    let w_mod = tape.matmul(target_src, pinv)?;
    let x_mod = tape.matmul(w_mod, pivot_dst)?;
    let w_data = tape.matmul(pivot_dst, pinv)?;
    let x_data = tape.matmul(w_data, target_src)?;
    Ok(PseudoNodes { pinv, x_mod, x_data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    fn target() -> (DatasetId, ModalityId) {
        ("d1".into(), "c".into())
    }

    /// Solves `x · G = r` for square nonsingular G by Gauss-Jordan with
    /// partial pivoting; no SVD involved.
    fn solve_right(r: &Matrix, g: &Matrix) -> Matrix {
        let n = g.rows();
        // work on gᵀ xᵀ = rᵀ
        let mut a = g.transpose();
        let mut b = r.transpose();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
            for k in 0..n {
                let t = a[(col, k)];
                a[(col, k)] = a[(piv, k)];
                a[(piv, k)] = t;
            }
            for k in 0..b.cols() {
                let t = b[(col, k)];
                b[(col, k)] = b[(piv, k)];
                b[(piv, k)] = t;
            }
            let d = a[(col, col)];
            for row in 0..n {
                if row == col {
                    continue;
                }
                let f = a[(row, col)] / d;
                for k in 0..n {
                    a[(row, k)] -= f * a[(col, k)];
                }
                for k in 0..b.cols() {
                    b[(row, k)] -= f * b[(col, k)];
                }
            }
        }
        for row in 0..n {
            let d = a[(row, row)];
            for k in 0..b.cols() {
                b[(row, k)] /= d;
            }
        }
        b.transpose()
    }

    /// Least-squares weights for full-row-rank pivots via normal equations:
    /// `W = F_dst · F_srcᵀ · (F_src · F_srcᵀ)⁻¹`.
    fn normal_equation_weights(f_dst: &Matrix, f_src: &Matrix) -> Matrix {
        let gram = f_src.matmul_nt(f_src).unwrap();
        let rhs = f_dst.matmul_nt(f_src).unwrap();
        solve_right(&rhs, &gram)
    }

    fn permutation(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        Matrix::from_fn(n, n, |i, j| if idx[i] == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn interpolate_cases() {
        assert_eq!(interpolate(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(interpolate(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert_eq!(interpolate(&[1.0, 0.0], &[0.0, 1.0], 1.5).unwrap(), vec![1.5, -0.5]);
        assert!(interpolate(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn multi_extrapolate_identity_permutation_and_loop() {
        let f = random(4, 3, 1);
        assert_eq!(multi_extrapolate(&MixWeights(Matrix::identity(4)), &f).unwrap(), f);
        let sel = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        let out = multi_extrapolate(&MixWeights(sel), &f).unwrap();
        assert_eq!(out.row(0), f.row(2));
        assert_eq!(out.row(1), f.row(0));

        let w = random(5, 4, 2);
        let out = multi_extrapolate(&MixWeights(w.clone()), &f).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[(i, k)] * f[(k, j)];
                }
                assert!((out[(i, j)] - acc).abs() < 1e-14);
            }
        }
        assert!(multi_extrapolate(&MixWeights(random(2, 3, 3)), &f).is_err());
    }

    #[test]
    fn cross_modal_self_transition_is_identity() {
        let f = random(6, 10, 4);
        let t = cross_modal_transition(&f, &f, &"b".into(), &"c".into()).unwrap();
        assert!(t.frozen);
        assert!(max_diff(&t.w, &Matrix::identity(6)) < 1e-8);
    }

    #[test]
    fn cross_modal_full_rank_reproduces_target() {
        let (c2, b2) = (random(6, 10, 5), random(6, 10, 6));
        let t = cross_modal_transition(&c2, &b2, &"b".into(), &"c".into()).unwrap();
        // W · F_b2 = F_c2 · F_b2⁺ · F_b2 is the projection of F_c2 onto rowspace(F_b2).
        let w_oracle = normal_equation_weights(&c2, &b2);
        assert!(max_diff(&t.w, &w_oracle) < 1e-8);
    }

    #[test]
    fn cross_modal_rank_deficient_is_min_norm_least_squares() {
        // pivot rank 3 with 6 rows; oracle: W = F_c · F_bᵀ · (F_b F_bᵀ)⁺
        let b2 = random(6, 3, 7).matmul(&random(3, 10, 8)).unwrap();
        let c2 = random(6, 10, 9);
        let t = cross_modal_transition(&c2, &b2, &"b".into(), &"c".into()).unwrap();
        assert!(t.w.is_finite());
        let gram_pinv = linalg::pinv(&b2.matmul_nt(&b2).unwrap(), 1e-12).unwrap();
        let oracle = c2.matmul_nt(&b2).unwrap().matmul(&gram_pinv).unwrap();
        assert!(max_diff(&t.w, &oracle) < 1e-8);
    }

    #[test]
    fn cross_data_self_and_permutation() {
        let b2 = random(6, 10, 10);
        let t = cross_data_transition(&b2, &b2, &"d2".into(), &"d1".into()).unwrap();
        assert!(max_diff(&t.w, &Matrix::identity(6)) < 1e-8);
        let p = permutation(6, 11);
        let b1 = p.matmul(&b2).unwrap();
        let t = cross_data_transition(&b1, &b2, &"d2".into(), &"d1".into()).unwrap();
        assert!(max_diff(&t.w, &p) < 1e-8);
        let b1 = random(6, 10, 12);
        let t = cross_data_transition(&b1, &b2, &"d2".into(), &"d1".into()).unwrap();
        assert!(max_diff(&t.w, &normal_equation_weights(&b1, &b2)) < 1e-8);
    }

    #[test]
    fn transition_batch_mismatch_fails() {
        let err = cross_data_transition(&random(5, 10, 1), &random(6, 10, 2), &"a".into(), &"b".into());
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert!(pseudo_pair(&random(5, 4, 1), &random(6, 4, 2), &random(6, 4, 3)).is_err());
    }

    #[test]
    fn x_mod_identical_pivot_projects_target() {
        let b = random(6, 10, 13);
        let c2 = random(6, 10, 14);
        let t = cross_modal_transition(&c2, &b, &"b".into(), &"c".into()).unwrap();
        let pe = pseudo_embed_x_mod(&t, &b, target()).unwrap();
        assert_eq!(pe.path, PseudoPath::XMod);
        let proj = linalg::pinv(&b, 1e-12).unwrap().matmul(&b).unwrap();
        assert!(max_diff(&pe.values, &c2.matmul(&proj).unwrap()) < 1e-10);
    }

    #[test]
    fn x_mod_square_invertible_pivot_recovers_target() {
        let b = random(6, 6, 15);
        let c2 = random(6, 6, 16);
        let (x_mod, x_data) = pseudo_pair(&b, &b, &c2).unwrap();
        assert!(max_diff(&x_mod, &c2) < 1e-10);
        assert!(max_diff(&x_data, &c2) < 1e-10);
    }

    #[test]
    fn x_mod_associativity() {
        let (b1, b2, c2) = (random(5, 9, 17), random(5, 9, 18), random(5, 9, 19));
        let p = linalg::pinv(&b2, 1e-12).unwrap();
        let left = c2.matmul(&p).unwrap().matmul(&b1).unwrap();
        let right = c2.matmul(&p.matmul(&b1).unwrap()).unwrap();
        assert!(max_diff(&left, &right) < 1e-10);
        let (x_mod, _) = pseudo_pair(&b1, &b2, &c2).unwrap();
        assert!(max_diff(&x_mod, &left) < 1e-10);
    }

    #[test]
    fn x_data_identical_pivot_and_permutation() {
        let b2 = random(8, 16, 20);
        let c2 = random(8, 16, 21);
        let t = cross_data_transition(&b2, &b2, &"d2".into(), &"d1".into()).unwrap();
        let pe = pseudo_embed_x_data(&t, &c2, target()).unwrap();
        assert!(max_diff(&pe.values, &c2) < 1e-10);

        let p = permutation(8, 22);
        let b1 = p.matmul(&b2).unwrap();
        let (_, x_data) = pseudo_pair(&b1, &b2, &c2).unwrap();
        assert!(max_diff(&x_data, &p.matmul(&c2).unwrap()) < 1e-10);
    }

    #[test]
    fn x_data_is_least_squares_then_mix() {
        for seed in 0..5 {
            let (b1, b2, c2) = (random(8, 16, 100 + seed), random(8, 16, 200 + seed), random(8, 16, 300 + seed));
            let (_, x_data) = pseudo_pair(&b1, &b2, &c2).unwrap();
            let w = normal_equation_weights(&b1, &b2);
            let oracle = multi_extrapolate(&MixWeights(w), &c2).unwrap();
            assert!(max_diff(&x_data, &oracle) < 1e-8);
        }
    }

    #[test]
    fn both_paths_linear_in_target() {
        let (b1, b2, c2) = (random(6, 12, 30), random(6, 12, 31), random(6, 12, 32));
        let (m1, d1) = pseudo_pair(&b1, &b2, &c2).unwrap();
        let (m2, d2) = pseudo_pair(&b1, &b2, &c2.scale(2.0)).unwrap();
        assert_eq!(m2, m1.scale(2.0));
        assert_eq!(d2, d1.scale(2.0));
    }

    #[test]
    fn wrong_transition_kind_rejected() {
        let f = random(4, 6, 1);
        let t = cross_data_transition(&f, &f, &"a".into(), &"b".into()).unwrap();
        assert!(pseudo_embed_x_mod(&t, &f, target()).is_err());
    }

    #[test]
    fn chained_identity() {
        let a = random(5, 16, 40);
        let b = random(5, 16, 41);
        let c3 = random(5, 16, 42);
        let out = chain_extrapolate(ChainInputs { f_a1: &a, f_a2: &a, f_b2: &b, f_b3: &b, f_c3: &c3 }).unwrap();
        assert!(max_diff(&out.b1_x_data, &b) < 1e-8);
        assert!(max_diff(&out.c1_x_data, &c3) < 1e-8);
    }

    #[test]
    fn chained_permutations_compose() {
        let a2 = random(5, 16, 50);
        let b3 = random(5, 16, 51);
        let c3 = random(5, 16, 52);
        let (p, q) = (permutation(5, 53), permutation(5, 54));
        // D1's a is a row permutation of D2's; D2's b is a row permutation of D3's.
        let a1 = p.matmul(&a2).unwrap();
        let b2 = q.matmul(&b3).unwrap();
        let out = chain_extrapolate(ChainInputs { f_a1: &a1, f_a2: &a2, f_b2: &b2, f_b3: &b3, f_c3: &c3 }).unwrap();
        let want = p.matmul(&q).unwrap().matmul(&c3).unwrap();
        assert!(max_diff(&out.c1_x_data, &want) < 1e-8);
    }

    #[test]
    fn chained_equals_two_x_data_steps() {
        let m: Vec<Matrix> = (0..5).map(|s| random(5, 16, 60 + s)).collect();
        let out = chain_extrapolate(ChainInputs { f_a1: &m[0], f_a2: &m[1], f_b2: &m[2], f_b3: &m[3], f_c3: &m[4] }).unwrap();
        let t1 = cross_data_transition(&m[0], &m[1], &"d2".into(), &"d1".into()).unwrap();
        let b1 = pseudo_embed_x_data(&t1, &m[2], ("d1".into(), "b".into())).unwrap();
        let t2 = cross_data_transition(&b1.values, &m[3], &"d3".into(), &"d1".into()).unwrap();
        let c1 = pseudo_embed_x_data(&t2, &m[4], target()).unwrap();
        assert!(max_diff(&out.c1_x_data, &c1.values) < 1e-10);
    }

    #[test]
    fn recorded_pseudo_matches_plain_and_is_frozen() {
        let (b1, b2, c2) = (random(4, 8, 70), random(4, 8, 71), random(4, 8, 72));
        let mut tape = Tape::new();
        let (n1, n2, n3) = (tape.input(b1.clone()), tape.input(b2.clone()), tape.input(c2.clone()));
        let nodes = record_pseudo(&mut tape, n1, n2, n3).unwrap();
        let (x_mod, x_data) = pseudo_pair(&b1, &b2, &c2).unwrap();
        assert_eq!(tape.value(nodes.x_mod), &x_mod);
        assert_eq!(tape.value(nodes.x_data), &x_data);
        assert!(matches!(tape.op(nodes.pinv), crate::diffnet::Op::FrozenPinv { .. }));
    }
}
