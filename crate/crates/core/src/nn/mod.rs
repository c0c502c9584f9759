//! Layers and optimizer built on the autodiff tape.

mod adam;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    attention_forward, neighbor_mean, Activation, AttentionBlock, KvCache, Linear, ResBlock,
    ResNet1D, ResNet1DConfig, SageConvLayer,
};
pub use params::{normal, Bound, ParamId, ParamStore};

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::features::FaceGraph;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn sage_path_graph_neighbor_mean() {
        let mut store = ParamStore::<f64>::new();
        let layer = SageConvLayer::new(&mut store, "s", 1, 1, &mut rng());
        *store.get_mut(layer.w_self) = Tensor::zeros(&[1, 1]);
        *store.get_mut(layer.w_neigh) = Tensor::full(&[1, 1], 1.0);
        let graph = FaceGraph {
            nodes: 2,
            edges: vec![(0, 1)],
        };
        let agg = Rc::new(neighbor_mean(&graph));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap());
        let y = layer.forward(&mut tape, &p, x, &agg).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 1.0]);
    }

    #[test]
    fn sage_zero_weights_give_bias() {
        let mut store = ParamStore::<f64>::new();
        let layer = SageConvLayer::new(&mut store, "s", 2, 3, &mut rng());
        *store.get_mut(layer.w_self) = Tensor::zeros(&[2, 3]);
        *store.get_mut(layer.w_neigh) = Tensor::zeros(&[2, 3]);
        *store.get_mut(layer.bias) = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let graph = FaceGraph {
            nodes: 2,
            edges: vec![(0, 1)],
        };
        let agg = Rc::new(neighbor_mean(&graph));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[5.0, -1.0, 0.5, 2.0]).unwrap());
        let y = layer.forward(&mut tape, &p, x, &agg).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn resnet_identity_kernel_doubles_input() {
        let mut store = ParamStore::<f64>::new();
        let cfg = ResNet1DConfig {
            input_width: 1,
            stage_widths: vec![1],
            blocks_per_stage: vec![1],
            kernel: 3,
            output_width: None,
            activation: Activation::Identity,
        };
        let net = ResNet1D::new(&mut store, "r", cfg, &mut rng()).unwrap();
        let ident = Tensor::from_f64(&[3, 1, 1], &[0.0, 1.0, 0.0]).unwrap();
        *store.get_mut(net.blocks[0].conv1.0) = ident.clone();
        *store.get_mut(net.blocks[0].conv2.0) = ident;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[4, 1], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = net.forward(&mut tape, &p, x, &[]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn resnet_zero_convs_project_input() {
        let mut store = ParamStore::<f64>::new();
        let cfg = ResNet1DConfig {
            input_width: 2,
            stage_widths: vec![3],
            blocks_per_stage: vec![2],
            kernel: 3,
            output_width: None,
            activation: Activation::Identity,
        };
        let net = ResNet1D::new(&mut store, "r", cfg, &mut rng()).unwrap();
        for b in &net.blocks {
            let s = store.get(b.conv1.0).shape().to_vec();
            *store.get_mut(b.conv1.0) = Tensor::zeros(&s);
        }
        let proj = store.get(net.blocks[0].projection.unwrap()).clone();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = [1.0, 2.0, -1.0, 0.5];
        let x = tape.constant(Tensor::from_f64(&[2, 2], &xs).unwrap());
        let y = net.forward(&mut tape, &p, x, &[]).unwrap();
        let expect = crate::autodiff::kernels::matmul(&xs, 2, 2, proj.data(), 3);
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    fn block(width: usize, heads: usize) -> (ParamStore<f64>, AttentionBlock) {
        let mut store = ParamStore::new();
        let b = AttentionBlock::new(&mut store, "a", width, heads, 2 * width, 0.3, &mut rng())
            .unwrap();
        (store, b)
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (store, b) = block(4, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[1, 4], &[0.1, 0.2, -0.3, 0.4]).unwrap());
        let w = b.attention_weights(&mut tape, &p, x, true).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_output_projections_are_identity() {
        let (mut store, b) = block(4, 2);
        *store.get_mut(b.out.w) = Tensor::zeros(&[4, 4]);
        *store.get_mut(b.ff2.w) = Tensor::zeros(&[8, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.4).collect();
        let x = tape.constant(Tensor::from_f64(&[3, 4], &xs).unwrap());
        let y = b.forward(&mut tape, &p, x, &[], true).unwrap();
        assert_eq!(tape.value(y).data(), &xs[..]);
    }

    #[test]
    fn causal_prefix_is_unaffected_by_suffix() {
        let (store, b) = block(8, 2);
        let run = |tail: f64| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut xs: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
            for v in &mut xs[24..] {
                *v += tail;
            }
            let x = tape.constant(Tensor::from_f64(&[5, 8], &xs).unwrap());
            let y = b.forward(&mut tape, &p, x, &[], true).unwrap();
            tape.value(y).data()[..24].to_vec()
        };
        assert_eq!(run(0.0), run(3.5));
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let (store, b) = block(8, 4);
        let xs: Vec<f64> = (0..32).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.5).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[4, 8], &xs).unwrap());
        let full = b.forward(&mut tape, &p, x, &[], true).unwrap();
        let full = tape.value(full).data().to_vec();

        let mut cache = KvCache::default();
        let mut got = Vec::new();
        for r in 0..4 {
            let mut tape = Tape::inference();
            let p = store.bind_frozen(&mut tape);
            let row = Tensor::from_f64(&[1, 8], &xs[r * 8..(r + 1) * 8]).unwrap();
            let x = tape.constant(row);
            let y = b.forward_cached(&mut tape, &p, x, &mut cache).unwrap();
            got.extend_from_slice(tape.value(y).data());
        }
        for (a, e) in got.iter().zip(&full) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn context_limit_is_enforced() {
        let (store, b) = block(4, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[5, 4]));
        let err = attention_forward(&mut tape, &p, x, &[b], &[], true, 4).unwrap_err();
        assert!(matches!(err, crate::Error::Context { len: 5, context: 4 }));
    }

    #[test]
    fn identical_seeds_train_identically() {
        let run = || {
            let mut r = rng();
            let mut store = ParamStore::<f32>::new();
            let lin = Linear::new(&mut store, "l", 3, 2, 0.5, &mut r);
            let mut adam = AdamState::new(store.tensors(), AdamConfig::default());
            for _ in 0..100 {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let x = tape.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., -1., 0.5, 2.]).unwrap());
                let y = lin.forward(&mut tape, &p, x).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let loss = tape.mean(y2).unwrap();
                let mut g = tape.backward(loss).unwrap();
                let grads = store.collect_grads(&p, &mut g);
                adam.step(store.tensors_mut(), &grads).unwrap();
            }
            store
        };
        let (a, b) = (run(), run());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            let bx: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }
}
