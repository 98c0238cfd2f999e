//! Boundary extraction and the average symmetric surface distance.

use super::overlap::BinaryMask;
use crate::error::{invalid, Result};

/// Mask pixels with at least one 4-neighbour outside the mask; pixels on the
/// image border always count as boundary.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width, m.height);
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            out[y * w + x] = edge || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1);
        }
    }
    BinaryMask {
        data: out,
        ..m.clone()
    }
}

const FAR: i64 = 1 << 40;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        let (q, p) = (q as i64, p as i64);
        ((f[q as usize] + q * q) - (f[p as usize] + p * p)) as f64 / (2 * (q - p)) as f64
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in pixels²) from every pixel to the
/// nearest set pixel of `m`. Requires `m` non-empty.
pub fn squared_distance_transform(m: &BinaryMask) -> Vec<i64> {
    let (w, h) = (m.width, m.height);
    let mut grid: Vec<i64> = m.data.iter().map(|&b| if b { 0 } else { FAR }).collect();
    let mut col = vec![0i64; h];
    let mut tmp = vec![0i64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0i64; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Sum over boundary pixels of both masks of the distance (mm) to the
/// other mask's boundary, and the number of boundary pixels.
pub fn surface_distance_sum(s: &BinaryMask, r: &BinaryMask) -> Result<(f64, usize)> {
    s.check_pair(r)?;
    if s.is_empty() || r.is_empty() {
        return Err(invalid("undefined surface distance: empty mask"));
    }
    let (bs, br) = (boundary(s), boundary(r));
    let (ds, dr) = (squared_distance_transform(&bs), squared_distance_transform(&br));
    // Each direction is summed on its own so that swapping S and R only
    // swaps the operands of the final addition.
    let one_way = |from: &BinaryMask, to: &[i64]| -> (f64, usize) {
        let mut sum = 0.0;
        let mut count = 0;
        for (i, &b) in from.data.iter().enumerate() {
            if b {
                sum += (to[i] as f64).sqrt() * s.spacing;
                count += 1;
            }
        }
        (sum, count)
    };
    let (a, na) = one_way(&bs, &dr);
    let (b, nb) = one_way(&br, &ds);
    Ok((a + b, na + nb))
}

/// Average symmetric surface distance in millimetres.
pub fn assd(s: &BinaryMask, r: &BinaryMask) -> Result<f64> {
    let (sum, count) = surface_distance_sum(s, r)?;
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, spacing: f64, on: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::new(w, h, spacing, (0..w * h).map(|i| on(i / w, i % w)).collect()).unwrap()
    }

    /// Boundary by the definition, checked pixel by pixel with signed offsets.
    fn boundary_oracle(m: &BinaryMask) -> Vec<(i64, i64)> {
        let (w, h) = (m.width as i64, m.height as i64);
        let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Exhaustive pairwise minimum distances between the two boundaries.
    fn assd_oracle(s: &BinaryMask, r: &BinaryMask) -> f64 {
        let (bs, br) = (boundary_oracle(s), boundary_oracle(r));
        let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
            set.iter()
                .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let mut sum = 0.0;
        for p in &bs {
            sum += nearest(p, &br) * s.spacing;
        }
        for p in &br {
            sum += nearest(p, &bs) * s.spacing;
        }
        sum / (bs.len() + br.len()) as f64
    }

    #[test]
    fn single_pixels_three_apart() {
        let s = mask(8, 8, 1.0, |y, x| (y, x) == (4, 1));
        let r = mask(8, 8, 1.0, |y, x| (y, x) == (4, 4));
        assert_eq!(assd(&s, &r).unwrap(), 3.0);
    }

    #[test]
    fn shifted_square_matches_the_oracle() {
        let s = mask(10, 10, 0.5, |y, x| (3..7).contains(&y) && (3..7).contains(&x));
        let r = mask(10, 10, 0.5, |y, x| (3..7).contains(&y) && (4..8).contains(&x));
        let got = assd(&s, &r).unwrap();
        assert_eq!(got, assd_oracle(&s, &r));
        // 12 + 12 boundary pixels, 12 of them 1 px from the other boundary.
        assert_eq!(got, 0.25);
    }

    #[test]
    fn image_border_counts_as_outside() {
        let full = mask(5, 5, 1.0, |_, _| true);
        let b = boundary(&full);
        assert_eq!(b.count(), 16);
        assert!(!b.get(2, 2));
        assert_eq!(assd(&full, &full).unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_are_undefined() {
        let e = mask(4, 4, 1.0, |_, _| false);
        let one = mask(4, 4, 1.0, |y, x| y == x);
        let err = assd(&e, &one).unwrap_err().to_string();
        assert!(err.contains("undefined surface distance"), "{err}");
        assert!(assd(&one, &e).is_err());
    }

    #[test]
    fn distance_transform_is_exact() {
        let m = mask(9, 7, 1.0, |y, x| (y, x) == (1, 2) || (y, x) == (5, 7));
        let d = squared_distance_transform(&m);
        for y in 0..7i64 {
            for x in 0..9i64 {
                let e = ((y - 1).pow(2) + (x - 2).pow(2)).min((y - 5).pow(2) + (x - 7).pow(2));
                assert_eq!(d[(y * 9 + x) as usize], e);
            }
        }
    }

    fn pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        let field = || prop::collection::vec(any::<bool>(), 256);
        (field(), field(), 0.1f64..2.0)
            .prop_filter("non-empty", |(a, b, _)| a.contains(&true) && b.contains(&true))
            .prop_map(|(a, b, sp)| {
                (
                    BinaryMask::new(16, 16, sp, a).unwrap(),
                    BinaryMask::new(16, 16, sp, b).unwrap(),
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn assd_matches_pairwise_oracle((s, r) in pair()) {
            let got = assd(&s, &r).unwrap();
            prop_assert!((got - assd_oracle(&s, &r)).abs() <= 1e-12 * got.max(1.0));
            prop_assert_eq!(got, assd(&r, &s).unwrap());
            prop_assert_eq!(assd(&s, &s).unwrap(), 0.0);
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn boundary_matches_definition((s, _r) in pair()) {
            let b = boundary(&s);
            let want = boundary_oracle(&s);
            prop_assert_eq!(b.count(), want.len());
            for (y, x) in want {
                prop_assert!(b.get(y as usize, x as usize));
            }
        }
    }
}
