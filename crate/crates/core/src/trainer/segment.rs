use crate::error::Result;
use crate::networks::RNet;
use crate::tensor::{Scalar, Shape, Tensor4};

/// z-scored intensities are divided by this before entering a network, so
/// the image range matches the generators' `tanh` output.
pub const INPUT_SCALE: f64 = 3.0;

const LIMIT: f64 = 0.999;

/// Maps a z-normalized `size x size` slice into `1 x 1 x size x size`
/// network units.
pub fn to_network_units<T: Scalar>(z: &[f64], size: usize) -> Tensor4<T> {
    let data = z.iter().map(|v| T::of((v / INPUT_SCALE).clamp(-LIMIT, LIMIT))).collect();
    Tensor4::from_vec(Shape::new(1, 1, size, size), data).expect("slice is size x size")
}

/// Per-pixel argmax over channels, row-major over (N, H, W). Ties go to the
/// lowest class index.
pub fn argmax_labels<T: Scalar>(probs: &Tensor4<T>) -> Vec<u8> {
    let s = probs.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n() * plane);
    for n in 0..s.n() {
        let item = probs.item(n);
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c() {
                if item[c * plane + p] > item[best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

const CHUNK: usize = 8;

/// Eval-mode argmax segmentation of an `N x 1 x H x W` batch.
pub fn segment<T: Scalar>(net: &RNet<T>, images: &Tensor4<T>) -> Result<Vec<u8>> {
    let n = images.shape().n();
    let mut out = Vec::with_capacity(images.len());
    for lo in (0..n).step_by(CHUNK) {
        let parts: Vec<Tensor4<T>> = (lo..(lo + CHUNK).min(n)).map(|i| images.batch_item(i)).collect();
        let refs: Vec<&Tensor4<T>> = parts.iter().collect();
        let (_, probs) = net.infer(&Tensor4::stack(&refs)?)?;
        out.extend(argmax_labels(&probs));
    }
    Ok(out)
}

/// Target-domain labels from the backward generator's segmentation head.
pub fn segment_target<T: Scalar>(b: &RNet<T>, y: &Tensor4<T>) -> Result<Vec<u8>> {
    segment(b, y)
}

/// Reference-domain labels from the forward generator's segmentation head.
pub fn segment_reference<T: Scalar>(f: &RNet<T>, x: &Tensor4<T>) -> Result<Vec<u8>> {
    segment(f, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::RNetConfig;
    use crate::tensor::rng_from_seed;
    use rand::Rng;

    fn net() -> RNet<f64> {
        RNet::new(
            RNetConfig {
                input_size: 16,
                depth: 2,
                base_channels: 4,
                ..RNetConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor4::from_fn(Shape::new(n, 1, 16, 16), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn ties_pick_lowest_class() {
        let p = Tensor4::from_vec(Shape::new(1, 3, 1, 2), vec![0.4, 0.1, 0.4, 0.8, 0.2, 0.1]).unwrap();
        assert_eq!(argmax_labels(&p), vec![0, 1]);
    }

    #[test]
    fn labels_agree_with_probabilities() {
        let f = net();
        let x = batch(10, 1);
        let labels = segment_reference(&f, &x).unwrap();
        assert!(labels.iter().all(|&l| l < 5));
        let (_, p) = f.infer(&x).unwrap();
        for n in 0..10 {
            for y in 0..16 {
                for xx in 0..16 {
                    let l = labels[(n * 16 + y) * 16 + xx] as usize;
                    assert!((0..5).all(|c| p.get(n, c, y, xx) <= p.get(n, l, y, xx)));
                }
            }
        }
        assert_eq!(segment_target(&f, &x).unwrap(), labels);
    }

    #[test]
    fn argmax_is_invariant_to_monotone_maps() {
        let (_, p) = net().infer(&batch(2, 5)).unwrap();
        let base = argmax_labels(&p);
        for f in [|v: f64| v.ln(), |v: f64| 3.0 * v + 1.0, |v: f64| v.powi(3), |v: f64| (5.0 * v).exp()] {
            assert_eq!(argmax_labels(&p.map(f)), base);
        }
    }

    #[test]
    fn wrong_size_is_an_error() {
        let f = net();
        assert!(segment(&f, &Tensor4::zeros(Shape::new(1, 1, 8, 8))).is_err());
    }

    #[test]
    fn network_units_are_open_interval() {
        let t = to_network_units::<f32>(&[-10.0, 0.0, 1.5, 10.0], 2);
        assert_eq!(t.data(), &[-0.999, 0.0, 0.5, 0.999]);
    }
}
