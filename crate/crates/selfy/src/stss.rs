//! Spatio-temporal self-similarity: the transform that turns a video feature
//! map `V (T, X, Y, C)` into the 6D tensor `S (T, X, Y, L, U, V)` where
//! `S[t,x,y,l,u,v] = sim(V[t,x,y], V[t+l, x+u, y+v])` over a local offset
//! window. Targets outside the clip are 0 (zero-padding convention for both
//! spatial and temporal overflow).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{mode_n_product, Tensor};

/// Norm guard for cosine similarity; zero vectors get similarity 0.
pub const NORM_EPS: f64 = 1e-8;

/// The local `(l, u, v)` neighbourhood the similarity is restricted to.
///
/// Temporal offsets are an explicit ordered list so every ablation offset set
/// ({0}, {1}, {-1,0,1}, ...) is expressible; the canonical symmetric window
/// is ascending `-d_l..=d_l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetWindow {
    temporal_offsets: Vec<i64>,
    d_u: usize,
    d_v: usize,
}

impl OffsetWindow {
    pub fn new(temporal_offsets: Vec<i64>, d_u: usize, d_v: usize) -> Result<Self> {
        if temporal_offsets.is_empty() {
            return Err(Error::Config("offset window needs at least one temporal offset".into()));
        }
        if !temporal_offsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "temporal offsets must be strictly increasing, got {temporal_offsets:?}"
            )));
        }
        Ok(OffsetWindow { temporal_offsets, d_u, d_v })
    }

    /// Symmetric window `l in -d_l..=d_l`.
    pub fn symmetric(d_l: usize, d_u: usize, d_v: usize) -> Self {
        OffsetWindow {
            temporal_offsets: (-(d_l as i64)..=d_l as i64).collect(),
            d_u,
            d_v,
        }
    }

    pub fn temporal_offsets(&self) -> &[i64] {
        &self.temporal_offsets
    }
    pub fn d_u(&self) -> usize {
        self.d_u
    }
    pub fn d_v(&self) -> usize {
        self.d_v
    }
    pub fn l_count(&self) -> usize {
        self.temporal_offsets.len()
    }
    pub fn u_count(&self) -> usize {
        2 * self.d_u + 1
    }
    pub fn v_count(&self) -> usize {
        2 * self.d_v + 1
    }
    /// Index of offset `l == 0` on the L axis, if present.
    pub fn zero_offset_index(&self) -> Option<usize> {
        self.temporal_offsets.iter().position(|&l| l == 0)
    }
}

/// Similarity function applied between feature vectors.
#[derive(Debug, Clone)]
pub enum SimilarityKind<E: Scalar> {
    /// eps-guarded cosine: `dot(a,b) / (max(|a|,eps) * max(|b|,eps))`.
    Cosine,
    /// Unnormalised dot product between two learned linear embeddings of the
    /// features: `dot(theta(a), phi(b))`. Both weights are `embed_dim x C`.
    EmbeddedGaussian { theta: Tensor<E>, phi: Tensor<E> },
}

/// The 6D similarity volume plus the window that produced it.
#[derive(Debug, Clone)]
pub struct StssTensor<E: Scalar> {
    pub values: Tensor<E>,
    pub window: OffsetWindow,
}

impl<E: Scalar> StssTensor<E> {
    /// `(T, X, Y, L, U, V)` extents.
    pub fn dims(&self) -> [usize; 6] {
        self.values.shape().try_into().expect("stss tensor is rank 6")
    }
}

/// eps-guarded cosine similarity between two equal-length vectors.
pub fn cosine_sim<E: Scalar>(a: &[E], b: &[E]) -> Result<E> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let eps = E::from_f64(NORM_EPS);
    let mut dot = E::ZERO;
    let mut na = E::ZERO;
    let mut nb = E::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(dot / (na.sqrt().maximum(eps) * nb.sqrt().maximum(eps)))
}

/// Spatial self-similarity of a single frame: `out[x,y,u,v] =
/// sim(I[x,y], I[x+u-d_u, y+v-d_v])`, zero where the target is out of bounds.
pub fn spatial_self_similarity<E: Scalar>(
    img: &Tensor<E>,
    window: &OffsetWindow,
) -> Result<Tensor<E>> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!(
            "spatial_self_similarity wants (X, Y, C), got {:?}",
            img.shape()
        )));
    }
    if window.temporal_offsets() != [0] {
        return Err(Error::Config(
            "spatial_self_similarity needs the single temporal offset {0}".into(),
        ));
    }
    let (x_n, y_n, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let v4 = img.reshape(&[1, x_n, y_n, c])?;
    let s = stss_transform(&v4, window, &SimilarityKind::Cosine)?;
    s.values.into_reshape(&[x_n, y_n, window.u_count(), window.v_count()])
}

/// Reference STSS transform: a single thread walking `(t, x, y, l, u, v)` in
/// output order.
pub fn stss_transform<E: Scalar>(
    v: &Tensor<E>,
    window: &OffsetWindow,
    kind: &SimilarityKind<E>,
) -> Result<StssTensor<E>> {
    let q = prepare_query(v, kind)?;
    let values = stss_values(&q, window, (usize::MAX, usize::MAX), false)?;
    Ok(StssTensor { values, window: window.clone() })
}

/// Cache-blocked STSS transform; bit-identical to [`stss_transform`] for all
/// inputs. Blocks the `(x, y)` loops into `tile`-sized blocks and, when
/// `parallel` holds, runs one rayon task per `(t, x-block)`. Every output
/// element is written by exactly one task, so results do not depend on the
/// thread count.
pub fn stss_transform_tiled<E: Scalar>(
    v: &Tensor<E>,
    window: &OffsetWindow,
    kind: &SimilarityKind<E>,
    tile: (usize, usize),
    parallel: bool,
) -> Result<StssTensor<E>> {
    if tile.0 == 0 || tile.1 == 0 {
        return Err(Error::Config("tile extents must be >= 1".into()));
    }
    let q = prepare_query(v, kind)?;
    let values = stss_values(&q, window, tile, parallel)?;
    Ok(StssTensor { values, window: window.clone() })
}

/// Query/target feature rows plus optional inverse norms, ready for the
/// similarity inner loop. For cosine, query and target alias the same map.
struct PreparedFeatures<E: Scalar> {
    query: Tensor<E>,
    target: Option<Tensor<E>>,
    /// `1 / max(|row|, eps)` per position; `None` for plain dot products.
    inv_norm_q: Option<Vec<E>>,
    inv_norm_t: Option<Vec<E>>,
}

fn prepare_query<E: Scalar>(
    v: &Tensor<E>,
    kind: &SimilarityKind<E>,
) -> Result<PreparedFeatures<E>> {
    if v.rank() != 4 {
        return Err(Error::Shape(format!(
            "stss_transform wants V of shape (T, X, Y, C), got {:?}",
            v.shape()
        )));
    }
    match kind {
        SimilarityKind::Cosine => {
            let c = v.shape()[3];
            let eps = E::from_f64(NORM_EPS);
            let inv: Vec<E> = v
                .data()
                .chunks_exact(c)
                .map(|row| {
                    let mut n = E::ZERO;
                    for &x in row {
                        n += x * x;
                    }
                    E::ONE / n.sqrt().maximum(eps)
                })
                .collect();
            Ok(PreparedFeatures {
                query: v.clone(),
                target: None,
                inv_norm_q: Some(inv.clone()),
                inv_norm_t: Some(inv),
            })
        }
        SimilarityKind::EmbeddedGaussian { theta, phi } => {
            let q = mode_n_product(v, theta, 3)?;
            let t = mode_n_product(v, phi, 3)?;
            Ok(PreparedFeatures { query: q, target: Some(t), inv_norm_q: None, inv_norm_t: None })
        }
    }
}

/// Shared inner kernel for all variants. Work is cut into `(t, x-block)`
/// segments that are contiguous in the output; `parallel` decides whether
/// segments run on rayon or on the calling thread, in either case producing
/// identical bytes.
fn stss_values<E: Scalar>(
    feats: &PreparedFeatures<E>,
    window: &OffsetWindow,
    tile: (usize, usize),
    parallel: bool,
) -> Result<Tensor<E>> {
    let q = &feats.query;
    let (t_n, x_n, y_n) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (l_n, u_n, v_n) = (window.l_count(), window.u_count(), window.v_count());
    let mut out = Tensor::zeros(&[t_n, x_n, y_n, l_n, u_n, v_n])?;
    let tile_x = tile.0.min(x_n);
    let tile_y = tile.1.min(y_n);
    let tiles_x = x_n.div_ceil(tile_x);
    let row_len = y_n * l_n * u_n * v_n;

    let mut segments: Vec<(usize, usize, usize, &mut [E])> = Vec::with_capacity(t_n * tiles_x);
    let mut rest = out.data_mut();
    for t in 0..t_n {
        for bx in 0..tiles_x {
            let x0 = bx * tile_x;
            let xn = tile_x.min(x_n - x0);
            let (seg, tail) = rest.split_at_mut(xn * row_len);
            segments.push((t, x0, xn, seg));
            rest = tail;
        }
    }
    debug_assert!(rest.is_empty());
    let run = |(t, x0, xn, seg): (usize, usize, usize, &mut [E])| {
        for ty0 in (0..y_n).step_by(tile_y) {
            stss_block(feats, window, t, x0, xn, ty0, tile_y.min(y_n - ty0), seg);
        }
    };
    if parallel {
        segments.into_par_iter().for_each(run);
    } else {
        segments.into_iter().for_each(run);
    }
    Ok(out)
}

/// Fill one `(t, x-block, y-block)` of the output. `seg` holds the full
/// output rows for `x0 .. x0+xn` of frame `t`.
fn stss_block<E: Scalar>(
    feats: &PreparedFeatures<E>,
    window: &OffsetWindow,
    t: usize,
    x0: usize,
    xn: usize,
    y0: usize,
    yn: usize,
    seg: &mut [E],
) {
    let q = &feats.query;
    let tgt = feats.target.as_ref().unwrap_or(q);
    let (t_n, x_n, y_n, c) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let (l_n, u_n, v_n) = (window.l_count(), window.u_count(), window.v_count());
    let d_u = window.d_u() as i64;
    let d_v = window.d_v() as i64;
    let cell = u_n * v_n;
    let row_len = y_n * l_n * cell;
    for (xi, xrow) in seg.chunks_mut(row_len).enumerate() {
        let x = x0 + xi;
        debug_assert!(xi < xn);
        for y in y0..y0 + yn {
            let qpos = (t * x_n + x) * y_n + y;
            let qrow = &q.data()[qpos * c..(qpos + 1) * c];
            let qn = feats.inv_norm_q.as_ref().map(|n| n[qpos]).unwrap_or(E::ONE);
            for (li, &l) in window.temporal_offsets().iter().enumerate() {
                let t2 = t as i64 + l;
                let dst = &mut xrow[(y * l_n + li) * cell..(y * l_n + li + 1) * cell];
                if t2 < 0 || t2 >= t_n as i64 {
                    dst.fill(E::ZERO);
                    continue;
                }
                let t2 = t2 as usize;
                for ui in 0..u_n {
                    let x2 = x as i64 + ui as i64 - d_u;
                    if x2 < 0 || x2 >= x_n as i64 {
                        dst[ui * v_n..(ui + 1) * v_n].fill(E::ZERO);
                        continue;
                    }
                    let x2 = x2 as usize;
                    for vi in 0..v_n {
                        let y2 = y as i64 + vi as i64 - d_v;
                        dst[ui * v_n + vi] = if y2 < 0 || y2 >= y_n as i64 {
                            E::ZERO
                        } else {
                            let tpos = (t2 * x_n + x2) * y_n + y2 as usize;
                            let trow = &tgt.data()[tpos * c..(tpos + 1) * c];
                            let tn = feats
                                .inv_norm_t
                                .as_ref()
                                .map(|n| n[tpos])
                                .unwrap_or(E::ONE);
                            let mut dot = E::ZERO;
                            for (&a, &b) in qrow.iter().zip(trow) {
                                dot += a * b;
                            }
                            dot * qn * tn
                        };
                    }
                }
            }
        }
    }
}

/// Gradient of the cosine STSS output w.r.t. `V`.
///
/// For `s = dot(a,b) / (na * nb)` with `na = max(|a|, eps)`:
/// `ds/da = b/(na*nb) - s * a / na^2` when `|a| >= eps`, else just the first
/// term (the guard makes the norm constant). Both the query and the target
/// position of every window entry receive gradient.
pub(crate) fn stss_cosine_backward<E: Scalar>(
    v: &Tensor<E>,
    window: &OffsetWindow,
    s: &Tensor<E>,
    gs: &Tensor<E>,
) -> Tensor<E> {
    let (t_n, x_n, y_n, c) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let (l_n, u_n, v_n) = (window.l_count(), window.u_count(), window.v_count());
    let eps = E::from_f64(NORM_EPS);
    // norms and 1/max(norm, eps)
    let mut norm = vec![E::ZERO; t_n * x_n * y_n];
    let mut inv = vec![E::ZERO; t_n * x_n * y_n];
    for (i, row) in v.data().chunks_exact(c).enumerate() {
        let mut n = E::ZERO;
        for &x in row {
            n += x * x;
        }
        let n = n.sqrt();
        norm[i] = n;
        inv[i] = E::ONE / n.maximum(eps);
    }
    let mut gv = Tensor::zeros(v.shape()).expect("v shape");
    let d_u = window.d_u() as i64;
    let d_v = window.d_v() as i64;
    let sd = s.data();
    let gd = gs.data();
    let mut idx = 0usize;
    for t in 0..t_n {
        for x in 0..x_n {
            for y in 0..y_n {
                let qpos = (t * x_n + x) * y_n + y;
                for (li, &l) in window.temporal_offsets().iter().enumerate() {
                    let _ = li;
                    let t2 = t as i64 + l;
                    for ui in 0..u_n {
                        let x2 = x as i64 + ui as i64 - d_u;
                        for vi in 0..v_n {
                            let y2 = y as i64 + vi as i64 - d_v;
                            let g = gd[idx];
                            let sval = sd[idx];
                            idx += 1;
                            if g == E::ZERO {
                                continue;
                            }
                            if t2 < 0
                                || t2 >= t_n as i64
                                || x2 < 0
                                || x2 >= x_n as i64
                                || y2 < 0
                                || y2 >= y_n as i64
                            {
                                continue;
                            }
                            let tpos =
                                ((t2 as usize) * x_n + x2 as usize) * y_n + y2 as usize;
                            let scale = inv[qpos] * inv[tpos];
                            // split borrows: gv rows for query and target may alias
                            let (qv, tv): (Vec<E>, Vec<E>) = {
                                let qrow = &v.data()[qpos * c..(qpos + 1) * c];
                                let trow = &v.data()[tpos * c..(tpos + 1) * c];
                                let mut qg = Vec::with_capacity(c);
                                let mut tg = Vec::with_capacity(c);
                                for k in 0..c {
                                    let mut dq = trow[k] * scale;
                                    if norm[qpos] >= eps {
                                        dq = dq - sval * qrow[k] * inv[qpos] * inv[qpos];
                                    }
                                    let mut dt = qrow[k] * scale;
                                    if norm[tpos] >= eps {
                                        dt = dt - sval * trow[k] * inv[tpos] * inv[tpos];
                                    }
                                    qg.push(g * dq);
                                    tg.push(g * dt);
                                }
                                (qg, tg)
                            };
                            let gvd = gv.data_mut();
                            for k in 0..c {
                                gvd[qpos * c + k] += qv[k];
                                gvd[tpos * c + k] += tv[k];
                            }
                        }
                    }
                }
            }
        }
    }
    gv
}

/// Forward for the already-embedded cross-dot similarity (used by the
/// embedded-Gaussian autodiff path): `S = dot(q[t,x,y], tg[t+l,x+u,y+v])`.
pub(crate) fn cross_dot_forward<E: Scalar>(
    q: &Tensor<E>,
    tg: &Tensor<E>,
    window: &OffsetWindow,
) -> Result<Tensor<E>> {
    if q.shape() != tg.shape() {
        return Err(Error::Shape("cross-dot inputs must share a shape".into()));
    }
    let feats = PreparedFeatures {
        query: q.clone(),
        target: Some(tg.clone()),
        inv_norm_q: None,
        inv_norm_t: None,
    };
    stss_values(&feats, window, (usize::MAX, usize::MAX), true)
}

/// Backward of [`cross_dot_forward`] w.r.t. both embedded maps.
pub(crate) fn cross_dot_backward<E: Scalar>(
    q: &Tensor<E>,
    tg: &Tensor<E>,
    window: &OffsetWindow,
    gs: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (t_n, x_n, y_n, c) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let (u_n, v_n) = (window.u_count(), window.v_count());
    let mut gq = Tensor::zeros(q.shape()).expect("q shape");
    let mut gt = Tensor::zeros(tg.shape()).expect("t shape");
    let d_u = window.d_u() as i64;
    let d_v = window.d_v() as i64;
    let gd = gs.data();
    let mut idx = 0usize;
    for t in 0..t_n {
        for x in 0..x_n {
            for y in 0..y_n {
                let qpos = (t * x_n + x) * y_n + y;
                for &l in window.temporal_offsets() {
                    let t2 = t as i64 + l;
                    for ui in 0..u_n {
                        let x2 = x as i64 + ui as i64 - d_u;
                        for vi in 0..v_n {
                            let y2 = y as i64 + vi as i64 - d_v;
                            let g = gd[idx];
                            idx += 1;
                            if g == E::ZERO
                                || t2 < 0
                                || t2 >= t_n as i64
                                || x2 < 0
                                || x2 >= x_n as i64
                                || y2 < 0
                                || y2 >= y_n as i64
                            {
                                continue;
                            }
                            let tpos =
                                ((t2 as usize) * x_n + x2 as usize) * y_n + y2 as usize;
                            for k in 0..c {
                                gq.data_mut()[qpos * c + k] += g * tg.data()[tpos * c + k];
                                gt.data_mut()[tpos * c + k] += g * q.data()[qpos * c + k];
                            }
                        }
                    }
                }
            }
        }
    }
    (gq, gt)
}

/// FNV-1a over the little-endian bytes; used to compare kernel variants.
pub fn checksum<E: Scalar>(t: &Tensor<E>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in t.data() {
        for b in v.to_le_bytes_vec() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_v(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn window_validation() {
        assert!(OffsetWindow::new(vec![], 1, 1).is_err());
        assert!(OffsetWindow::new(vec![1, 0], 1, 1).is_err());
        assert!(OffsetWindow::new(vec![0, 0], 1, 1).is_err());
        let w = OffsetWindow::symmetric(2, 4, 4);
        assert_eq!(w.temporal_offsets(), &[-2, -1, 0, 1, 2]);
        assert_eq!((w.l_count(), w.u_count(), w.v_count()), (5, 9, 9));
        assert_eq!(w.zero_offset_index(), Some(2));
        let w = OffsetWindow::new(vec![1], 4, 4).unwrap();
        assert_eq!(w.zero_offset_index(), None);
    }

    #[test]
    fn cosine_sim_basics() {
        let a = [1.0f64, 2.0, -0.5];
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let e1 = [1.0f64, 0.0];
        let e2 = [0.0f64, 1.0];
        assert!(cosine_sim(&e1, &e2).unwrap().abs() < 1e-6);
        assert!(cosine_sim(&e1, &[1.0]).is_err());
        // zero vector hits the norm guard, similarity 0
        let z = [0.0f64, 0.0];
        assert_eq!(cosine_sim(&z, &e1).unwrap(), 0.0);
    }

    #[test]
    fn constant_image_self_similarity() {
        let img = Tensor::filled(&[4, 4, 3], 0.7f64).unwrap();
        let w = OffsetWindow::new(vec![0], 1, 1).unwrap();
        let s = spatial_self_similarity(&img, &w).unwrap();
        assert_eq!(s.shape(), &[4, 4, 3, 3]);
        for x in 0..4usize {
            for y in 0..4usize {
                for ui in 0..3usize {
                    for vi in 0..3usize {
                        let in_bounds = (x as i64 + ui as i64 - 1) >= 0
                            && (x as i64 + ui as i64 - 1) < 4
                            && (y as i64 + vi as i64 - 1) >= 0
                            && (y as i64 + vi as i64 - 1) < 4;
                        let got = s.get(&[x, y, ui, vi]);
                        if in_bounds {
                            assert!((got - 1.0).abs() < 1e-6, "expected 1 at {x},{y},{ui},{vi}");
                        } else {
                            assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_offset_slice_is_one_for_nonzero_features() {
        let v = random_v(&[3, 4, 4, 2], 4);
        let w = OffsetWindow::symmetric(1, 1, 1);
        let s = stss_transform(&v, &w, &SimilarityKind::Cosine).unwrap();
        let li = w.zero_offset_index().unwrap();
        for t in 0..3 {
            for x in 0..4 {
                for y in 0..4 {
                    let got = s.values.get(&[t, x, y, li, 1, 1]);
                    assert!((got - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_v_padding_pattern() {
        let v = Tensor::filled(&[3, 4, 4, 2], 0.5f64).unwrap();
        let w = OffsetWindow::symmetric(1, 1, 1);
        let s = stss_transform(&v, &w, &SimilarityKind::Cosine).unwrap();
        // interior entries 1.0
        let got = s.values.get(&[1, 2, 2, 1, 1, 1]);
        assert!((got - 1.0).abs() < 1e-12);
        // t = 0 at l = -1 is temporal padding
        for x in 0..4 {
            for y in 0..4 {
                for ui in 0..3 {
                    for vi in 0..3 {
                        assert_eq!(s.values.get(&[0, x, y, 0, ui, vi]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn tiled_matches_naive_bitwise() {
        let v = random_v(&[4, 7, 6, 3], 11);
        let w = OffsetWindow::symmetric(1, 2, 2);
        let naive = stss_transform(&v, &w, &SimilarityKind::Cosine).unwrap();
        for tile in [(1, 1), (2, 3), (4, 4), (16, 16)] {
            for parallel in [false, true] {
                let tiled =
                    stss_transform_tiled(&v, &w, &SimilarityKind::Cosine, tile, parallel).unwrap();
                assert_eq!(checksum(&tiled.values), checksum(&naive.values), "tile {tile:?}");
                assert_eq!(tiled.values.data(), naive.values.data());
            }
        }
    }

    #[test]
    fn embedded_gaussian_is_embedding_dot() {
        let v = random_v(&[2, 3, 3, 4], 9);
        let theta = random_v(&[5, 4], 10);
        let phi = random_v(&[5, 4], 12);
        let w = OffsetWindow::new(vec![0, 1], 1, 1).unwrap();
        let kind = SimilarityKind::EmbeddedGaussian { theta: theta.clone(), phi: phi.clone() };
        let s = stss_transform(&v, &w, &kind).unwrap();
        let q = mode_n_product(&v, &theta, 3).unwrap();
        let tg = mode_n_product(&v, &phi, 3).unwrap();
        // spot-check a handful of entries against the direct formula
        for (t, x, y, li, ui, vi) in [(0, 1, 1, 0, 1, 1), (0, 1, 2, 1, 2, 0), (1, 2, 2, 0, 0, 1)] {
            let l = w.temporal_offsets()[li];
            let (t2, x2, y2) =
                (t as i64 + l, x as i64 + ui as i64 - 1, y as i64 + vi as i64 - 1);
            let expect = if t2 < 0 || t2 >= 2 || x2 < 0 || x2 >= 3 || y2 < 0 || y2 >= 3 {
                0.0
            } else {
                (0..5)
                    .map(|k| {
                        q.get(&[t, x, y, k]) * tg.get(&[t2 as usize, x2 as usize, y2 as usize, k])
                    })
                    .sum()
            };
            let got = s.values.get(&[t, x, y, li, ui, vi]);
            assert!((got - expect).abs() < 1e-10, "at {t},{x},{y},{li},{ui},{vi}");
        }
    }

    #[test]
    fn appearance_scale_invariance_of_cosine() {
        let v = random_v(&[3, 4, 4, 3], 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut scaled = v.clone();
        let c = 3;
        for pos in 0..(scaled.numel() / c) {
            let gamma: f64 = rng.gen_range(0.1..10.0);
            for k in 0..c {
                scaled.data_mut()[pos * c + k] *= gamma;
            }
        }
        let w = OffsetWindow::symmetric(1, 2, 2);
        let s0 = stss_transform(&v, &w, &SimilarityKind::Cosine).unwrap();
        let s1 = stss_transform(&scaled, &w, &SimilarityKind::Cosine).unwrap();
        for (a, b) in s0.values.data().iter().zip(s1.values.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
