//! Contextual recurrent layer over the four lattice DAGs.
//!
//! For DAG `m` and vertex `v` with predecessors `(u, o)`:
//!
//! ```text
//! h_m(v) = relu(U_m x(v) + Σ W_m[o] h_m(u) + G g + T t + b_m)
//! logits(v) = Σ_m V_m h_m(v) + b_y
//! ```
//!
//! Recurrent weights are keyed by the predecessor's relative offset, giving
//! three matrices per DAG. `G` and `T` are shared by all four DAGs. The class
//! scores are emitted before any softmax.

use crate::error::{dim_err, Error, Result};
use crate::graph::DagPlan;
use crate::par;
use crate::params::{push_matrix, push_matrix_mut, push_vec, push_vec_mut, ParamMut, ParamRef, ParamSet};
use crate::tensor::{add_into, FeatureMap, Matrix, Scalar};

/// Sizes of one contextual recurrent layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnnDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub global_dim: usize,
    pub topic_dim: usize,
}

impl CrnnDims {
    /// Hidden size equal to the input channel count, global size `9 × input`.
    pub fn new(input_dim: usize, classes: usize, topic_dim: usize) -> Self {
        CrnnDims {
            input_dim,
            hidden_dim: input_dim,
            classes,
            global_dim: 9 * input_dim,
            topic_dim,
        }
    }

    pub fn with_hidden(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }
}

/// Weights owned by one directional DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct DagWeights<T> {
    /// input -> hidden, `hidden × input`
    pub u: Matrix<T>,
    /// hidden -> hidden per predecessor slot, each `hidden × hidden`
    pub w: [Matrix<T>; 3],
    /// hidden -> class scores, `classes × hidden`
    pub v: Matrix<T>,
    pub b_h: Vec<T>,
}

impl<T: Scalar> DagWeights<T> {
    pub fn zeros(d: &CrnnDims) -> Self {
        DagWeights {
            u: Matrix::zeros(d.hidden_dim, d.input_dim),
            w: std::array::from_fn(|_| Matrix::zeros(d.hidden_dim, d.hidden_dim)),
            v: Matrix::zeros(d.classes, d.hidden_dim),
            b_h: vec![T::zero(); d.hidden_dim],
        }
    }
}

/// Global and topic context projections shared across the four DAGs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWeights<T> {
    /// `hidden × global_dim`
    pub g: Matrix<T>,
    /// `hidden × topic_dim`
    pub t: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrnnParams<T> {
    pub dims: CrnnDims,
    /// SE, SW, NW, NE.
    pub dags: [DagWeights<T>; 4],
    pub context: ContextWeights<T>,
    pub b_y: Vec<T>,
}

impl<T: Scalar> CrnnParams<T> {
    pub fn zeros(dims: CrnnDims) -> Self {
        CrnnParams {
            dims,
            dags: std::array::from_fn(|_| DagWeights::zeros(&dims)),
            context: ContextWeights {
                g: Matrix::zeros(dims.hidden_dim, dims.global_dim),
                t: Matrix::zeros(dims.hidden_dim, dims.topic_dim),
            },
            b_y: vec![T::zero(); dims.classes],
        }
    }

    /// Zero the recurrent, global and topic matrices. What remains is an
    /// independent per-position classifier.
    pub fn zero_context_paths(&mut self) {
        for d in &mut self.dags {
            for w in &mut d.w {
                w.fill(T::zero());
            }
        }
        self.context.g.fill(T::zero());
        self.context.t.fill(T::zero());
    }
}

impl<T: Scalar> ParamSet<T> for CrnnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (m, d) in self.dags.iter().enumerate() {
            let p = crate::params::join(prefix, &format!("dag{m}"));
            push_matrix(out, &p, "u", &d.u);
            for (s, w) in d.w.iter().enumerate() {
                push_matrix(out, &p, &format!("w{s}"), w);
            }
            push_matrix(out, &p, "v", &d.v);
            push_vec(out, &p, "b_h", &d.b_h);
        }
        push_matrix(out, prefix, "g", &self.context.g);
        push_matrix(out, prefix, "t", &self.context.t);
        push_vec(out, prefix, "b_y", &self.b_y);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (m, d) in self.dags.iter_mut().enumerate() {
            let p = crate::params::join(prefix, &format!("dag{m}"));
            push_matrix_mut(out, &p, "u", &mut d.u);
            for (s, w) in d.w.iter_mut().enumerate() {
                push_matrix_mut(out, &p, &format!("w{s}"), w);
            }
            push_matrix_mut(out, &p, "v", &mut d.v);
            push_vec_mut(out, &p, "b_h", &mut d.b_h);
        }
        push_matrix_mut(out, prefix, "g", &mut self.context.g);
        push_matrix_mut(out, prefix, "t", &mut self.context.t);
        push_vec_mut(out, prefix, "b_y", &mut self.b_y);
    }
}

fn check_inputs<T: Scalar>(
    x: &FeatureMap<T>,
    plan: &DagPlan,
    dims: &CrnnDims,
    g: &[T],
    t: &[T],
) -> Result<()> {
    if x.channels() != dims.input_dim {
        return Err(dim_err!(
            "crnn: input has {} channels, layer expects {}",
            x.channels(),
            dims.input_dim
        ));
    }
    if (plan.height, plan.width) != (x.height(), x.width()) {
        return Err(dim_err!(
            "crnn: plan is {}x{}, input is {}x{}",
            plan.height,
            plan.width,
            x.height(),
            x.width()
        ));
    }
    if g.len() != dims.global_dim {
        return Err(dim_err!(
            "crnn: global feature length {} != {}",
            g.len(),
            dims.global_dim
        ));
    }
    if t.len() != dims.topic_dim {
        return Err(dim_err!(
            "crnn: topic feature length {} != {}",
            t.len(),
            dims.topic_dim
        ));
    }
    Ok(())
}

/// `G g + T t + b_h`, identical for every vertex of a DAG.
fn context_drive<T: Scalar>(
    context: &ContextWeights<T>,
    b_h: &[T],
    g: &[T],
    t: &[T],
) -> Vec<T> {
    let mut c = b_h.to_vec();
    context.g.matvec_acc(g, &mut c);
    context.t.matvec_acc(t, &mut c);
    c
}

/// Hidden states of one DAG, visiting vertices in plan order.
pub fn dag_forward<T: Scalar>(
    x: &FeatureMap<T>,
    plan: &DagPlan,
    dag: &DagWeights<T>,
    context: &ContextWeights<T>,
    g: &[T],
    t: &[T],
) -> Result<FeatureMap<T>> {
    let hd = dag.b_h.len();
    if dag.u.shape() != [hd, x.channels()] {
        return Err(dim_err!(
            "dag_forward: U is {:?}, expected [{hd}, {}]",
            dag.u.shape(),
            x.channels()
        ));
    }
    if context.g.shape() != [hd, g.len()] || context.t.shape() != [hd, t.len()] {
        return Err(dim_err!("dag_forward: context weights do not match g/t"));
    }
    if (plan.height, plan.width) != (x.height(), x.width()) {
        return Err(dim_err!("dag_forward: plan and input sizes differ"));
    }
    let drive = context_drive(context, &dag.b_h, g, t);
    let mut hidden = FeatureMap::zeros(x.height(), x.width(), hd);
    let mut acc = vec![T::zero(); hd];
    for &v in &plan.order {
        acc.copy_from_slice(&drive);
        dag.u.matvec_acc(x.pixel(v.row, v.col), &mut acc);
        for link in plan.predecessors_of(v) {
            dag.w[link.slot].matvec_acc(hidden.pixel(link.coord.row, link.coord.col), &mut acc);
        }
        for (o, &a) in hidden.pixel_mut(v.row, v.col).iter_mut().zip(&acc) {
            *o = crate::tensor::relu_scalar(a);
        }
    }
    Ok(hidden)
}

/// Gradients produced by one DAG's backward pass.
#[derive(Clone, Debug)]
pub struct DagBackward<T> {
    pub grads: DagWeights<T>,
    pub d_context: ContextWeights<T>,
    /// Gradient with respect to the global feature vector.
    pub d_g: Vec<T>,
    /// Gradient with respect to the topic feature vector.
    pub d_t: Vec<T>,
    pub d_input: FeatureMap<T>,
}

/// Reverse pass through one DAG.
///
/// `d_hidden` holds the direct gradient reaching each hidden state from the
/// readout. Recurrent contributions from successors are pushed backwards while
/// the order is walked in reverse. The returned `grads.v` is left zero; the
/// readout gradient is the caller's.
#[allow(clippy::too_many_arguments)]
pub fn dag_backward<T: Scalar>(
    x: &FeatureMap<T>,
    hidden: &FeatureMap<T>,
    plan: &DagPlan,
    dag: &DagWeights<T>,
    context: &ContextWeights<T>,
    g: &[T],
    t: &[T],
    d_hidden: FeatureMap<T>,
) -> Result<DagBackward<T>> {
    let hd = dag.b_h.len();
    let xd = x.channels();
    if hidden.dims() != (x.height(), x.width(), hd) || d_hidden.dims() != hidden.dims() {
        return Err(Error::State(format!(
            "dag_backward: cached hidden {:?} / upstream {:?} do not match input {:?}",
            hidden.dims(),
            d_hidden.dims(),
            x.dims()
        )));
    }
    if (plan.height, plan.width) != (x.height(), x.width()) {
        return Err(Error::State("dag_backward: plan does not match cache".into()));
    }
    let mut dh = d_hidden;
    let mut grads = DagWeights {
        u: Matrix::zeros(hd, xd),
        w: std::array::from_fn(|_| Matrix::zeros(hd, hd)),
        v: Matrix::zeros(dag.v.rows(), hd),
        b_h: vec![T::zero(); hd],
    };
    let mut d_input = FeatureMap::zeros(x.height(), x.width(), xd);
    let mut delta = vec![T::zero(); hd];
    for &v in plan.order.iter().rev() {
        let h_v = hidden.pixel(v.row, v.col);
        for ((d, &g_h), &h) in delta.iter_mut().zip(dh.pixel(v.row, v.col)).zip(h_v) {
            *d = if h > T::zero() { g_h } else { T::zero() };
        }
        if delta.iter().all(|&d| d == T::zero()) {
            continue;
        }
        for link in plan.predecessors_of(v) {
            let (pr, pc) = (link.coord.row, link.coord.col);
            grads.w[link.slot].outer_acc(&delta, hidden.pixel(pr, pc));
            dag.w[link.slot].matvec_t_acc(&delta, dh.pixel_mut(pr, pc));
        }
        grads.u.outer_acc(&delta, x.pixel(v.row, v.col));
        dag.u.matvec_t_acc(&delta, d_input.pixel_mut(v.row, v.col));
        add_into(&mut grads.b_h, &delta);
    }
    // the context drive enters every vertex identically
    let d_drive = grads.b_h.clone();
    let mut d_context = ContextWeights {
        g: Matrix::zeros(hd, g.len()),
        t: Matrix::zeros(hd, t.len()),
    };
    d_context.g.outer_acc(&d_drive, g);
    d_context.t.outer_acc(&d_drive, t);
    let mut d_g = vec![T::zero(); g.len()];
    context.g.matvec_t_acc(&d_drive, &mut d_g);
    let mut d_t = vec![T::zero(); t.len()];
    context.t.matvec_t_acc(&d_drive, &mut d_t);
    Ok(DagBackward {
        grads,
        d_context,
        d_g,
        d_t,
        d_input,
    })
}

/// Everything [`crnn_backward`] needs; consumed by that call.
#[derive(Clone, Debug)]
pub struct CrnnCache<T> {
    dims: CrnnDims,
    input: FeatureMap<T>,
    hidden: [FeatureMap<T>; 4],
    g: Vec<T>,
    t: Vec<T>,
}

impl<T: Scalar> CrnnCache<T> {
    pub fn hidden(&self, m: usize) -> &FeatureMap<T> {
        &self.hidden[m]
    }
    pub fn input(&self) -> &FeatureMap<T> {
        &self.input
    }
}

/// Run the four DAGs and sum their readouts into class scores.
pub fn crnn_forward<T: Scalar>(
    x: &FeatureMap<T>,
    plans: &[DagPlan; 4],
    params: &CrnnParams<T>,
    g: &[T],
    t: &[T],
) -> Result<(FeatureMap<T>, CrnnCache<T>)> {
    for plan in plans {
        check_inputs(x, plan, &params.dims, g, t)?;
    }
    let hidden: Vec<Result<FeatureMap<T>>> = par::map_indexed(4, |m| {
        dag_forward(x, &plans[m], &params.dags[m], &params.context, g, t)
    });
    let mut hs = Vec::with_capacity(4);
    for h in hidden {
        hs.push(h?);
    }
    let hidden: [FeatureMap<T>; 4] = hs.try_into().expect("four DAGs");

    let c = params.dims.classes;
    let mut logits = FeatureMap::zeros(x.height(), x.width(), c);
    for r in 0..x.height() {
        for col in 0..x.width() {
            let o = logits.pixel_mut(r, col);
            o.copy_from_slice(&params.b_y);
            for (m, h) in hidden.iter().enumerate() {
                params.dags[m].v.matvec_acc(h.pixel(r, col), o);
            }
        }
    }
    Ok((
        logits,
        CrnnCache {
            dims: params.dims,
            input: x.clone(),
            hidden,
            g: g.to_vec(),
            t: t.to_vec(),
        },
    ))
}

/// Gradients of [`crnn_forward`].
#[derive(Clone, Debug)]
pub struct CrnnBackward<T> {
    pub grads: CrnnParams<T>,
    pub d_input: FeatureMap<T>,
    pub d_g: Vec<T>,
    pub d_t: Vec<T>,
}

pub fn crnn_backward<T: Scalar>(
    cache: CrnnCache<T>,
    plans: &[DagPlan; 4],
    params: &CrnnParams<T>,
    d_logits: &FeatureMap<T>,
) -> Result<CrnnBackward<T>> {
    let dims = cache.dims;
    if params.dims != dims {
        return Err(Error::State(
            "crnn_backward: parameters differ from the forward call".into(),
        ));
    }
    let (h, w) = (cache.input.height(), cache.input.width());
    if d_logits.dims() != (h, w, dims.classes) {
        return Err(Error::State(format!(
            "crnn_backward: d_logits {:?} does not match cached output {:?}",
            d_logits.dims(),
            (h, w, dims.classes)
        )));
    }
    if plans.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::State("crnn_backward: plans do not match cache".into()));
    }

    let mut grads = CrnnParams::zeros(dims);
    for px in d_logits.data().chunks_exact(dims.classes) {
        add_into(&mut grads.b_y, px);
    }

    let parts: Vec<Result<(DagBackward<T>, Matrix<T>)>> = par::map_indexed(4, |m| {
        let hidden = &cache.hidden[m];
        let dag = &params.dags[m];
        let mut d_v = Matrix::zeros(dims.classes, dims.hidden_dim);
        let mut direct = FeatureMap::zeros(h, w, dims.hidden_dim);
        for r in 0..h {
            for c in 0..w {
                let dl = d_logits.pixel(r, c);
                d_v.outer_acc(dl, hidden.pixel(r, c));
                dag.v.matvec_t_acc(dl, direct.pixel_mut(r, c));
            }
        }
        let back = dag_backward(
            &cache.input,
            hidden,
            &plans[m],
            dag,
            &params.context,
            &cache.g,
            &cache.t,
            direct,
        )?;
        Ok((back, d_v))
    });

    let mut d_input = FeatureMap::zeros(h, w, dims.input_dim);
    let mut d_g = vec![T::zero(); dims.global_dim];
    let mut d_t = vec![T::zero(); dims.topic_dim];
    for (m, part) in parts.into_iter().enumerate() {
        let (back, d_v) = part?;
        let dst = &mut grads.dags[m];
        dst.u = back.grads.u;
        dst.w = back.grads.w;
        dst.b_h = back.grads.b_h;
        dst.v = d_v;
        add_into(grads.context.g.data_mut(), back.d_context.g.data());
        add_into(grads.context.t.data_mut(), back.d_context.t.data());
        d_input.add_assign(&back.d_input)?;
        add_into(&mut d_g, &back.d_g);
        add_into(&mut d_t, &back.d_t);
    }
    Ok(CrnnBackward {
        grads,
        d_input,
        d_g,
        d_t,
    })
}

/// Tie the three offset matrices of every DAG to the first one.
pub fn reduce_to_shared_weights<T: Scalar>(mut params: CrnnParams<T>) -> CrnnParams<T> {
    for d in &mut params.dags {
        let shared = d.w[0].clone();
        d.w[1] = shared.clone();
        d.w[2] = shared;
    }
    params
}
