//! Tour of the tape-based autodiff engine: build a graph over leased
//! parameters, backprop a scalar loss, verify one gradient against a
//! central finite difference, and take an SGD step.

use densecap::tensor::{Graph, ParamStore, SgdState, Tensor};

fn main() -> densecap::Result<()> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(&[2, 2], vec![0.5, -0.3, 0.8, 0.1])?);
    let b = store.add("b", Tensor::from_vec(&[1, 2], vec![0.05, -0.02])?);

    // loss = sum(tanh(x·W + b)^2)
    let loss_of = |store: &ParamStore| -> densecap::Result<(Graph, densecap::tensor::Var)> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, -2.0])?, false);
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let h = g.matmul(x, wv)?;
        let h = g.add(h, bv)?;
        let h = g.tanh(h)?;
        let sq = g.mul(h, h)?;
        let loss = g.sum(sq)?;
        Ok((g, loss))
    };

    let (mut g, loss) = loss_of(&store)?;
    let loss_v = g.value(loss)[0];
    g.backward(loss)?;
    store.zero_grads();
    g.flush_grads(&mut store);
    println!("loss = {loss_v:.6}");
    println!("dL/dw = {:?}", store.entry(w).grad);

    // central finite difference on w[0]
    let h_step = 1e-6;
    let analytic = store.entry(w).grad[0];
    let mut probe = store.clone();
    probe.entry_mut(w).value.data[0] += h_step;
    let (g2, l2) = loss_of(&probe)?;
    probe.entry_mut(w).value.data[0] -= 2.0 * h_step;
    let (g3, l3) = loss_of(&probe)?;
    let numeric = (g2.value(l2)[0] - g3.value(l3)[0]) / (2.0 * h_step);
    println!("analytic {analytic:.9} vs numeric {numeric:.9}");
    assert!((analytic - numeric).abs() / analytic.abs().max(1e-12) < 1e-5);

    // one momentum-SGD step reduces the loss
    let mut sgd = SgdState::new(&store, 0.1, 0.9)?;
    sgd.step(&mut store);
    let (g4, l4) = loss_of(&store)?;
    println!("loss after one step = {:.6}", g4.value(l4)[0]);
    assert!(g4.value(l4)[0] < loss_v);
    Ok(())
}
