//! Low-rank upload compression.
//!
//! A weight-matrix update is sent as two factors `A (rows x r)` and
//! `B (r x cols)` obtained by truncating its SVD, and rebuilt at the
//! satellite as `reference + A B`. When factoring would not shrink the payload
//! (`r (rows + cols) >= rows cols`) the matrix goes out dense and is recovered
//! exactly. Bias vectors always go out dense.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tensor, TensorMut};

pub const BYTES_PER_VALUE: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankUpdate {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rank: usize,
}

impl LowRankUpdate {
    pub fn bytes(&self) -> u64 {
        (self.rank * (self.a.nrows() + self.b.ncols())) as u64 * BYTES_PER_VALUE
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.a * &self.b
    }
}

/// Best rank-`r` factorization of `delta` by singular-value truncation, its
/// reconstruction, and the Frobenius norm of the residual. `r` is clamped to
/// `min(rows, cols)`; at that rank the factorization is exact.
pub fn lora_roundtrip(delta: &DMatrix<f64>, rank: usize) -> Result<(LowRankUpdate, DMatrix<f64>, f64)> {
    if rank == 0 {
        return Err(Error::Argument("rank must be >= 1".into()));
    }
    let (rows, cols) = delta.shape();
    let full = rows.min(cols);
    let r = rank.min(full);
    let update = if r == full {
        if rows <= cols {
            LowRankUpdate {
                a: DMatrix::identity(rows, rows),
                b: delta.clone(),
                rank: r,
            }
        } else {
            LowRankUpdate {
                a: delta.clone(),
                b: DMatrix::identity(cols, cols),
                rank: r,
            }
        }
    } else {
        let svd = delta.clone().svd(true, true);
        let u = svd.u.as_ref().expect("left singular vectors requested");
        let vt = svd.v_t.as_ref().expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let mut a = DMatrix::zeros(rows, r);
        let mut b = DMatrix::zeros(r, cols);
        for (k, &i) in order.iter().take(r).enumerate() {
            a.set_column(k, &(u.column(i) * svd.singular_values[i]));
            b.set_row(k, &vt.row(i));
        }
        LowRankUpdate { a, b, rank: r }
    };
    let recon = update.reconstruct();
    let err = (delta - &recon).norm();
    Ok((update, recon, err))
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodedTensor {
    /// The local tensor itself.
    Exact(Vec<f64>),
    /// Factors of `local - reference`.
    LowRank(LowRankUpdate),
}

impl EncodedTensor {
    pub fn bytes(&self) -> u64 {
        match self {
            EncodedTensor::Exact(v) => v.len() as u64 * BYTES_PER_VALUE,
            EncodedTensor::LowRank(u) => u.bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub tensors: Vec<EncodedTensor>,
}

impl EncodedGroup {
    pub fn bytes(&self) -> u64 {
        self.tensors.iter().map(EncodedTensor::bytes).sum()
    }
}

fn compresses(rows: usize, cols: usize, rank: Option<usize>) -> Option<usize> {
    let r = rank?;
    (cols > 1 && r * (rows + cols) < rows * cols).then_some(r)
}

/// Upload size of `group` under the given rank, from shapes alone.
pub fn upload_bytes<G: ParamGroup>(group: &G, rank: Option<usize>) -> u64 {
    group
        .tensors()
        .iter()
        .map(|t| {
            let (rows, cols) = t.shape();
            match (t, compresses(rows, cols, rank)) {
                (Tensor::Matrix(_), Some(r)) => (r * (rows + cols)) as u64 * BYTES_PER_VALUE,
                _ => (rows * cols) as u64 * BYTES_PER_VALUE,
            }
        })
        .sum()
}

pub fn encode<G: ParamGroup>(local: &G, reference: &G, rank: Option<usize>) -> Result<EncodedGroup> {
    if !local.same_shape(reference) {
        return Err(Error::Protocol("upload does not match the reference shape".into()));
    }
    let tensors = local
        .tensors()
        .iter()
        .zip(reference.tensors().iter())
        .map(|(l, r)| {
            let (rows, cols) = l.shape();
            match (l, r, compresses(rows, cols, rank)) {
                (Tensor::Matrix(lm), Tensor::Matrix(rm), Some(rank)) => {
                    let delta = *lm - *rm;
                    lora_roundtrip(&delta, rank).map(|(u, _, _)| EncodedTensor::LowRank(u))
                }
                _ => Ok(EncodedTensor::Exact(l.as_slice().to_vec())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedGroup { tensors })
}

/// Rebuild the uploaded group against the satellite's reference copy.
pub fn decode<G: ParamGroup>(encoded: &EncodedGroup, reference: &G) -> Result<G> {
    let mut out = reference.clone();
    let slots = out.tensors_mut();
    if slots.len() != encoded.tensors.len() {
        return Err(Error::Protocol("upload has the wrong number of tensors".into()));
    }
    for (mut dst, enc) in slots.into_iter().zip(&encoded.tensors) {
        match enc {
            EncodedTensor::Exact(v) => {
                let s = dst.as_mut_slice();
                if s.len() != v.len() {
                    return Err(Error::Protocol("dense upload has the wrong length".into()));
                }
                s.copy_from_slice(v);
            }
            EncodedTensor::LowRank(u) => {
                let TensorMut::Matrix(m) = &mut dst else {
                    return Err(Error::Protocol("low-rank upload for a vector".into()));
                };
                let delta = u.reconstruct();
                if delta.shape() != m.shape() {
                    return Err(Error::Protocol("low-rank upload has the wrong shape".into()));
                }
                for (d, x) in m.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                    *d += x;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::Gate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn exact_rank_one_recovered() {
        let u = random(5, 1, 1);
        let v = random(1, 4, 2);
        let (upd, _, err) = lora_roundtrip(&(&u * &v), 1).unwrap();
        assert!(err < 1e-14, "{err}");
        assert_eq!(upd.bytes(), (5 + 4) * 8);
    }

    #[test]
    fn full_rank_is_exact() {
        for (r, c) in [(4, 6), (6, 4), (3, 3)] {
            let m = random(r, c, 7);
            let (upd, recon, err) = lora_roundtrip(&m, 10).unwrap();
            assert_eq!(upd.rank, r.min(c));
            assert_eq!(err, 0.0);
            assert_eq!(recon, m);
        }
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(lora_roundtrip(&random(2, 2, 0), 0).is_err());
    }

    #[test]
    fn reconstruction_has_requested_rank() {
        let m = random(8, 6, 3);
        let (_, recon, _) = lora_roundtrip(&m, 2).unwrap();
        let sv = recon.svd(false, false).singular_values;
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10).count(), 2);
    }

    #[test]
    fn codec_roundtrip_and_bytes() {
        let reference = Gate {
            layers: vec![random(3, 8, 4), random(3, 8, 5)],
        };
        let local = Gate {
            layers: vec![random(3, 8, 6), random(3, 8, 7)],
        };
        // dense: exact recovery
        let enc = encode(&local, &reference, None).unwrap();
        assert!(decode(&enc, &reference).unwrap().bit_eq(&local));
        assert_eq!(enc.bytes(), 2 * 24 * 8);
        assert_eq!(enc.bytes(), upload_bytes(&local, None));
        // rank 1 compresses a 3x8 matrix: 11 < 24
        let enc = encode(&local, &reference, Some(1)).unwrap();
        assert_eq!(enc.bytes(), 2 * 11 * 8);
        assert_eq!(enc.bytes(), upload_bytes(&local, Some(1)));
        // rank 3 does not compress: sent exact
        let enc = encode(&local, &reference, Some(3)).unwrap();
        assert!(decode(&enc, &reference).unwrap().bit_eq(&local));
    }
}
