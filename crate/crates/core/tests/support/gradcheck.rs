//! Finite-difference oracle for reverse-mode gradients. Shared by the core
//! gradient tests and the acceptance suite; each check panics on mismatch.

use rand::Rng;
use scriptbridge_core::model::{
    anchor_matrix, encode_pooled, init_params, project_anchors, AnchorConfig, ModelConfig,
    ModelParams, ParamNodes,
};
use scriptbridge_core::numcore::{Graph, NodeId, Tensor};
use scriptbridge_core::objectives::{
    graph_loss, loss_breakdown, EmbeddingBatch, LossConfig, LossTerms,
};
use scriptbridge_core::seed;
use scriptbridge_core::synthgen::{Canvas, Lexicon};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Relative error with a floor so that near-zero gradients compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Compares graph gradients of `build` against finite differences of the
/// graph's own forward value, for every element of every input.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.backward(out).unwrap();
    for (k, id) in ids.iter().enumerate() {
        for e in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let an = g.grad(*id).data()[e];
            assert!(
                rel_err(an, fd) <= REL_TOL,
                "input {k} element {e}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

/// Every primitive op on 20 random instances.
pub fn check_primitive_ops() {
    for inst in 0..20u64 {
        let mut rng = seed::rng(&[inst, 0xfd]);
        let a = random_tensor(&mut rng, &[3, 4], 1.0);
        let b = random_tensor(&mut rng, &[4, 2], 1.0);
        let c = random_tensor(&mut rng, &[3, 2], 1.0);
        let bias = random_tensor(&mut rng, &[2], 1.0);
        let s = random_tensor(&mut rng, &[1], 1.0);
        let w = random_tensor(&mut rng, &[3, 2], 1.0);

        // weighted sum keeps every output element in play
        let weighted = |g: &mut Graph, x: NodeId, w: NodeId| {
            let p = g.mul(x, w).unwrap();
            g.sum(p)
        };

        check_op(vec![a.clone(), b.clone(), w.clone()], |g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            weighted(g, m, ids[2])
        });
        check_op(vec![c.clone(), bias.clone(), w.clone()], |g, ids| {
            let m = g.add_bias(ids[0], ids[1]).unwrap();
            let t = g.tanh(m);
            weighted(g, t, ids[2])
        });
        check_op(vec![c.clone(), s.clone(), w.clone()], |g, ids| {
            let e = g.exp(ids[1]);
            let m = g.mul_scalar(ids[0], e).unwrap();
            weighted(g, m, ids[2])
        });
        check_op(vec![c.clone(), w.clone()], |g, ids| {
            let n = g.l2_normalize(ids[0]).unwrap();
            weighted(g, n, ids[1])
        });
        check_op(vec![a.clone(), a.transpose().unwrap()], |g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            let t = g.transpose(m).unwrap();
            let ce = g.diag_cross_entropy(t).unwrap();
            g.affine(ce, 2.0, 1.0)
        });
        check_op(
            vec![c.clone(), w.clone(), random_tensor(&mut rng, &[6, 2], 1.0)],
            |g, ids| {
                let cat = g.concat_rows(ids[0], ids[1]).unwrap();
                weighted(g, cat, ids[2])
            },
        );
        check_op(vec![c.clone(), c.map(|x| x * 0.5 + 0.1)], |g, ids| {
            let sum = g.add(ids[0], ids[1]).unwrap();
            let r = g.relu(sum);
            let sc = g.scale(r, 3.0);
            weighted(g, sc, ids[1])
        });
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        canvas: Canvas {
            height: 8,
            width: 8,
        },
        pool: 4,
        hidden: 5,
        anchor: AnchorConfig {
            base_dim: 6,
            embed_dim: 3,
            language_offset_scale: 0.1,
            anchor_seed: 11,
        },
        tau_init: 0.07,
    }
}

fn plain_loss(
    params: &ModelParams,
    pooled: &Tensor,
    anchors: &Tensor,
    labels: &[usize],
    terms: LossTerms,
) -> f64 {
    let v = encode_pooled(params, pooled).unwrap();
    let z = project_anchors(params, anchors).unwrap();
    let langs = vec!["en".to_string(); labels.len()];
    let batch = EmbeddingBatch::new(v, z, labels.to_vec(), langs).unwrap();
    loss_breakdown(&batch, params.temperature(), &LossConfig::default(), terms)
        .unwrap()
        .total
}

/// Gradient of the total loss with respect to every trainable parameter
/// on 20 random instances, across three objective combinations.
pub fn check_total_loss_gradients() {
    let cfg = tiny_config();
    let langs: Vec<String> = ["en", "zh", "es"].iter().map(|s| s.to_string()).collect();
    let lexicon = Lexicon::build(3, &langs, 5).unwrap();
    let term_sets = [
        LossTerms::ALL,
        LossTerms {
            v2t: true,
            t2v: false,
            inv: false,
        },
        LossTerms {
            v2t: false,
            t2v: false,
            inv: true,
        },
    ];
    for inst in 0..20u64 {
        let terms = term_sets[inst as usize % term_sets.len()];
        let mut rng = seed::rng(&[inst, 0xbead]);
        let mut params = init_params(inst, &cfg).unwrap();
        params.log_temperature = Tensor::scalar(rng.random_range(0.05f64..0.5).ln());
        for b in [&mut params.b1, &mut params.b2, &mut params.b3] {
            for x in b.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
        let n = 6;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let items: Vec<(usize, &str)> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (y, langs[i % 3].as_str()))
            .collect();
        let anchors = anchor_matrix(items, &lexicon, &cfg.anchor).unwrap();
        let pooled = Tensor::new(
            vec![n, cfg.pooled_dim()],
            (0..n * cfg.pooled_dim())
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap();

        let mut g = Graph::new();
        let nodes = ParamNodes::register(&mut g, &params);
        let x = g.leaf(pooled.clone());
        let a = g.leaf(anchors.clone());
        let v = nodes.visual(&mut g, x).unwrap();
        let z = nodes.text(&mut g, a).unwrap();
        let loss = graph_loss(
            &mut g,
            v,
            z,
            nodes.log_temperature(),
            &labels,
            &LossConfig::default(),
            terms,
        )
        .unwrap();
        let graph_value = g.value(loss.total).item();
        let plain_value = plain_loss(&params, &pooled, &anchors, &labels, terms);
        assert!((graph_value - plain_value).abs() < 1e-10);
        g.backward(loss.total).unwrap();
        let grads: Vec<Tensor> = nodes.grads(&g).iter().map(|t| (*t).clone()).collect();
        // frozen anchors receive a gradient in the graph but are never exposed
        // as parameters; only the eight trainable tensors are compared here
        for (k, grad) in grads.iter().enumerate() {
            for e in 0..grad.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[k].data_mut()[e] += STEP;
                let mut minus = params.clone();
                minus.tensors_mut()[k].data_mut()[e] -= STEP;
                let fd = (plain_loss(&plus, &pooled, &anchors, &labels, terms)
                    - plain_loss(&minus, &pooled, &anchors, &labels, terms))
                    / (2.0 * STEP);
                let an = grad.data()[e];
                assert!(
                    rel_err(an, fd) <= REL_TOL,
                    "instance {inst} ({}) tensor {k} element {e}: analytic {an} vs numeric {fd}",
                    terms.label()
                );
            }
        }
    }
}
