//! Minimal dense-array autodiff used by the codec and the layered transformer.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Grads, Graph, RopeTables, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

#[cfg(test)]
mod gradcheck {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Compares tape gradients with central differences for every input element.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let loss_of = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0] as f64
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eps = 1e-2f32;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("gradient present");
            for e in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps as f64);
                let an = analytic.data()[e] as f64;
                let tol = 2e-2 * fd.abs().max(an.abs()) + 2e-3;
                assert!(
                    (fd - an).abs() <= tol,
                    "input {i} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn reduce(g: &mut Graph, out: Var, seed: u64) -> Var {
        let shape = g.value(out).shape().to_vec();
        let target = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        g.mse_loss(out, target).unwrap()
    }

    #[test]
    fn matmul_bias_activations() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 0.5, &mut r);
        let b = Tensor::randn(&[5], 0.5, &mut r);
        check(vec![x, w, b], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_bias(h, v[2]).unwrap();
            let a = g.silu(h);
            let c = g.gelu(h);
            let s = g.add(a, c).unwrap();
            let s = g.scale(s, 0.7);
            reduce(g, s, 1)
        });
    }

    #[test]
    fn layer_norm_and_modulation() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let sh = Tensor::randn(&[2, 6], 0.5, &mut r);
        let sc = Tensor::randn(&[2, 6], 0.5, &mut r);
        let gate = Tensor::randn(&[2, 6], 0.5, &mut r);
        check(vec![x, sh, sc, gate], |g, v| {
            let n = g.layer_norm(v[0], 1e-6);
            let m = g.modulate(n, v[1], v[2]).unwrap();
            let o = g.mul_bcast(m, v[3]).unwrap();
            reduce(g, o, 2)
        });
    }

    #[test]
    fn token_plumbing() {
        let mut r = rng();
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let p = Tensor::randn(&[2, 4], 1.0, &mut r);
        let table = Tensor::randn(&[2, 4], 1.0, &mut r);
        let m = Tensor::randn(&[3, 8], 1.0, &mut r);
        check(vec![a, p, table, m], |g, v| {
            let pb = g.broadcast_batch(v[1], 2).unwrap();
            let cat = g.concat_tokens(&[v[0], pb]).unwrap();
            let biased = g.segment_bias(cat, v[2], &[0..2, 2..4]).unwrap();
            let sl = g.slice_tokens(biased, 1, 3).unwrap();
            let cols = g.slice_cols(v[3], 2, 4).unwrap();
            let s = g.add(sl, sl).unwrap();
            let l1 = reduce(g, s, 3);
            let l2 = reduce(g, cols, 4);
            g.add(l1, l2).unwrap()
        });
    }

    #[test]
    fn rope_and_attention() {
        let mut r = rng();
        let (b, t, heads, d) = (2, 5, 2, 4);
        let c = heads * d;
        let q = Tensor::randn(&[b, t, c], 1.0, &mut r);
        let k = Tensor::randn(&[b, t, c], 1.0, &mut r);
        let v = Tensor::randn(&[b, t, c], 1.0, &mut r);
        let pairs = d / 2;
        let angles: Vec<f32> = (0..t * pairs).map(|i| 0.37 * i as f32).collect();
        let tables = RopeTables {
            cos: Arc::new(angles.iter().map(|a| a.cos()).collect()),
            sin: Arc::new(angles.iter().map(|a| a.sin()).collect()),
            pairs,
        };
        check(vec![q, k, v], move |g, vars| {
            let qr = g.rope(vars[0], heads, &tables).unwrap();
            let kr = g.rope(vars[1], heads, &tables).unwrap();
            let o = g.attention(qr, kr, vars[2], heads).unwrap();
            reduce(g, o, 5)
        });
    }

    #[test]
    fn conv_and_upsample() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 6, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.3, &mut r);
        let b = Tensor::randn(&[4], 0.3, &mut r);
        let w2 = Tensor::randn(&[2, 4, 3, 3], 0.3, &mut r);
        let b2 = Tensor::randn(&[2], 0.3, &mut r);
        check(vec![x, w, b, w2, b2], |g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            let u = g.upsample2x(h).unwrap();
            let o = g.conv2d(u, v[3], v[4], 1, 1).unwrap();
            reduce(g, o, 6)
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 2], 1.0));
        let w = g.leaf(Tensor::full(&[2, 2], 0.5), false);
        let a = g.param(Tensor::full(&[2, 2], 0.1));
        let h = g.matmul(x, w).unwrap();
        let h2 = g.matmul(h, a).unwrap();
        let l = g.mse_loss(h2, Tensor::zeros(&[2, 2])).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let o = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let out = g.value(o);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(co * 3 + oy) * 3 + ox];
                    assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                }
            }
        }
    }
}
