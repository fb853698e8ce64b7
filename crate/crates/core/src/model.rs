//! Embedding tables, dot-product scoring, light graph convolution and norm
//! clipping.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// Plain matrix factorisation: final embeddings are the trainable tables.
    Mf,
    /// Light graph convolution: final embeddings average `K` rounds of
    /// normalised neighbourhood propagation.
    Lgcn,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Mf => "mf",
            Backbone::Lgcn => "lgcn",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Backbone::Mf),
            "lgcn" => Ok(Backbone::Lgcn),
            other => Err(Error::Argument(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Symmetric-degree-normalised user–item adjacency stored as CSR over the
/// stacked node set (users first, then items). The edge weight between `u`
/// and `i` is `1 / sqrt(deg(u) deg(i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_interactions(ds: &InteractionDataset) -> Self {
        let n_users = ds.n_users();
        let n_items = ds.n_items();
        let item_deg = ds.item_degrees();

        let mut item_users: Vec<Vec<u32>> = vec![Vec::new(); n_items];
        for (u, items) in ds.iter() {
            for &i in items {
                item_users[i as usize].push(u as u32);
            }
        }

        let n_nodes = n_users + n_items;
        let mut indptr = Vec::with_capacity(n_nodes + 1);
        let mut indices = Vec::with_capacity(2 * ds.n_interactions());
        let mut weights = Vec::with_capacity(2 * ds.n_interactions());
        indptr.push(0);
        for (_, items) in ds.iter() {
            let du = items.len() as f64;
            for &i in items {
                indices.push((n_users + i as usize) as u32);
                weights.push(1.0 / (du * item_deg[i as usize] as f64).sqrt());
            }
            indptr.push(indices.len());
        }
        for (i, users) in item_users.iter().enumerate() {
            let di = item_deg[i] as f64;
            for &u in users {
                indices.push(u);
                weights.push(1.0 / (ds.positives(u as usize).len() as f64 * di).sqrt());
            }
            indptr.push(indices.len());
        }
        Self {
            n_users,
            n_items,
            indptr,
            indices,
            weights,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    /// Weighted neighbours of a stacked node index.
    pub fn neighbours(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[node]..self.indptr[node + 1];
        self.indices[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(&j, &w)| (j as usize, w))
    }

    /// `A x` for a stacked `n_nodes x d` matrix.
    pub fn spmm(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut out = vec![0.0; self.n_nodes() * d];
        out.par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(node, row)| {
                for (j, w) in self.neighbours(node) {
                    for (o, &v) in row.iter_mut().zip(x.row(j)) {
                        *o += w * v;
                    }
                }
            });
        Array2::from_shape_vec((self.n_nodes(), d), out).expect("row-major buffer")
    }

    /// Mean of `x, A x, ..., A^k x`.
    pub fn layer_mean(&self, x: ArrayView2<f64>, k: usize) -> Array2<f64> {
        let mut acc = x.to_owned();
        let mut layer = x.to_owned();
        for _ in 0..k {
            layer = self.spmm(layer.view());
            acc += &layer;
        }
        acc / (k as f64 + 1.0)
    }

    /// Row sums of the combined coefficient matrix `(1/(k+1)) sum_l A^l`.
    /// All coefficients are non-negative, so a node's final norm is at most
    /// its row sum times the largest layer-0 norm.
    pub fn combined_row_sums(&self, k: usize) -> Vec<f64> {
        let ones = Array2::ones((self.n_nodes(), 1));
        self.layer_mean(ones.view(), k).column(0).to_vec()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let mut dense = Array2::zeros((n, n));
        for node in 0..n {
            for (j, w) in self.neighbours(node) {
                dense[[node, j]] = w;
            }
        }
        dense
    }
}

/// Trainable user and item tables plus the backbone that maps them to final
/// scoring embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    user_emb: Array2<f64>,
    item_emb: Array2<f64>,
    backbone: Backbone,
    n_layers: usize,
    clip_bound: f64,
    graph: Option<NormalizedAdjacency>,
    version: u64,
}

impl EmbeddingModel {
    pub fn from_tables(
        user_emb: Array2<f64>,
        item_emb: Array2<f64>,
        backbone: Backbone,
        n_layers: usize,
        clip_bound: f64,
    ) -> Result<Self> {
        if user_emb.ncols() != item_emb.ncols() {
            return Err(Error::DimensionMismatch {
                expected: user_emb.ncols(),
                found: item_emb.ncols(),
            });
        }
        if clip_bound.is_nan() || clip_bound <= 0.0 {
            return Err(Error::Argument(format!(
                "clip bound must be positive, got {clip_bound}"
            )));
        }
        Ok(Self {
            user_emb,
            item_emb,
            backbone,
            n_layers: if backbone == Backbone::Mf {
                0
            } else {
                n_layers
            },
            clip_bound,
            graph: None,
            version: 0,
        })
    }

    /// Gaussian initialisation with standard deviation `0.1 / sqrt(d)`. LGCN
    /// models get their graph from `train`.
    pub fn init<R: Rng>(
        train: &InteractionDataset,
        d: usize,
        backbone: Backbone,
        n_layers: usize,
        clip_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        let std = 0.1 / (d as f64).sqrt();
        let mut table = |rows: usize| {
            Array2::from_shape_simple_fn((rows, d), || std * rng.sample::<f64, _>(StandardNormal))
        };
        let user_emb = table(train.n_users());
        let item_emb = table(train.n_items());
        let mut model = Self::from_tables(user_emb, item_emb, backbone, n_layers, clip_bound)?;
        if backbone == Backbone::Lgcn {
            model.attach_graph(train)?;
        }
        Ok(model)
    }

    /// Builds the normalised adjacency for LGCN from training interactions.
    /// A no-op for MF.
    pub fn attach_graph(&mut self, train: &InteractionDataset) -> Result<()> {
        if train.n_users() != self.n_users() || train.n_items() != self.n_items() {
            return Err(Error::Dataset(format!(
                "graph dataset is {}x{}, model is {}x{}",
                train.n_users(),
                train.n_items(),
                self.n_users(),
                self.n_items()
            )));
        }
        if self.backbone == Backbone::Lgcn {
            self.graph = Some(NormalizedAdjacency::from_interactions(train));
            self.version += 1;
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn graph(&self) -> Option<&NormalizedAdjacency> {
        self.graph.as_ref()
    }

    /// Bumped on every mutation of the tables; propagated snapshots carry the
    /// version they were computed from.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn user_emb(&self) -> ArrayView2<'_, f64> {
        self.user_emb.view()
    }

    pub fn item_emb(&self) -> ArrayView2<'_, f64> {
        self.item_emb.view()
    }

    pub fn tables_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        self.version += 1;
        (&mut self.user_emb, &mut self.item_emb)
    }

    /// Largest L2 norm over all trainable rows.
    pub fn max_row_norm(&self) -> f64 {
        self.user_emb
            .rows()
            .into_iter()
            .chain(self.item_emb.rows())
            .map(|r| norm(r))
            .fold(0.0, f64::max)
    }

    fn stacked(&self) -> Array2<f64> {
        concatenate(Axis(0), &[self.user_emb.view(), self.item_emb.view()])
            .expect("tables share their column count")
    }

    fn require_graph(&self) -> Result<&NormalizedAdjacency> {
        self.graph
            .as_ref()
            .ok_or_else(|| Error::Contract("LGCN model has no graph attached".into()))
    }

    /// Maps gradients with respect to final embeddings back onto the
    /// trainable tables. Propagation is linear with a symmetric operator, so
    /// this is the same layer average applied to the gradient.
    pub fn backpropagate(
        &self,
        grad_final_user: ArrayView2<f64>,
        grad_final_item: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match self.backbone {
            Backbone::Mf => Ok((grad_final_user.to_owned(), grad_final_item.to_owned())),
            Backbone::Lgcn => {
                let graph = self.require_graph()?;
                let stacked = concatenate(Axis(0), &[grad_final_user, grad_final_item])
                    .expect("gradients share their column count");
                let out = graph.layer_mean(stacked.view(), self.n_layers);
                Ok(split_stacked(out, self.n_users()))
            }
        }
    }
}

fn split_stacked(stacked: Array2<f64>, n_users: usize) -> (Array2<f64>, Array2<f64>) {
    let users = stacked.slice(s![..n_users, ..]).to_owned();
    let items = stacked.slice(s![n_users.., ..]).to_owned();
    (users, items)
}

pub(crate) fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Final scoring embeddings for one version of an [`EmbeddingModel`].
#[derive(Debug, Clone)]
pub struct PropagatedEmbeddings {
    pub final_user: Array2<f64>,
    pub final_item: Array2<f64>,
    pub source_version: u64,
}

impl PropagatedEmbeddings {
    pub fn user_scores(&self, user: usize) -> Array1<f64> {
        self.final_item.dot(&self.final_user.row(user))
    }
}

/// Final embeddings for either backbone.
pub fn propagate(model: &EmbeddingModel) -> Result<PropagatedEmbeddings> {
    match model.backbone {
        Backbone::Mf => Ok(PropagatedEmbeddings {
            final_user: model.user_emb.clone(),
            final_item: model.item_emb.clone(),
            source_version: model.version,
        }),
        Backbone::Lgcn => propagate_lgcn(model),
    }
}

/// `E^(k+1) = A E^(k)` on the stacked user/item matrix; final embeddings are
/// the uniform mean of layers `0..=K`.
pub fn propagate_lgcn(model: &EmbeddingModel) -> Result<PropagatedEmbeddings> {
    if model.backbone != Backbone::Lgcn {
        return Err(Error::Contract(
            "graph propagation requested for an MF model".into(),
        ));
    }
    let graph = model.require_graph()?;
    let out = graph.layer_mean(model.stacked().view(), model.n_layers);
    let (final_user, final_item) = split_stacked(out, model.n_users());
    Ok(PropagatedEmbeddings {
        final_user,
        final_item,
        source_version: model.version,
    })
}

fn check_current(model: &EmbeddingModel, prop: &PropagatedEmbeddings) -> Result<()> {
    if prop.source_version != model.version {
        return Err(Error::Contract(format!(
            "propagated embeddings are stale (version {} vs model {})",
            prop.source_version, model.version
        )));
    }
    Ok(())
}

fn check_range(kind: &'static str, id: usize, bound: usize) -> Result<()> {
    if id >= bound {
        return Err(Error::Range { kind, id, bound });
    }
    Ok(())
}

/// `f_u(i) = <e_u, e_i>` on final embeddings.
pub fn score(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    user: usize,
    item: usize,
) -> Result<f64> {
    check_current(model, prop)?;
    check_range("user", user, model.n_users())?;
    check_range("item", item, model.n_items())?;
    Ok(prop.final_user.row(user).dot(&prop.final_item.row(item)))
}

/// Scores for every `(users[a], items[b])` pair.
pub fn score_block(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    users: &[usize],
    items: &[usize],
) -> Result<Array2<f64>> {
    check_current(model, prop)?;
    for &u in users {
        check_range("user", u, model.n_users())?;
    }
    for &i in items {
        check_range("item", i, model.n_items())?;
    }
    let u = prop.final_user.select(Axis(0), users);
    let i = prop.final_item.select(Axis(0), items);
    Ok(u.dot(&i.t()))
}

/// Projects `v` onto the L2 ball of radius `bound`.
pub fn clip_norm(v: &[f64], bound: f64) -> Result<Vec<f64>> {
    if bound.is_nan() || bound <= 0.0 {
        return Err(Error::Argument(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    let mut out = v.to_vec();
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > bound {
        let scale = bound / n;
        out.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(out)
}

fn clip_rows(table: &mut Array2<f64>, bound: f64) -> bool {
    let mut changed = false;
    for mut row in table.rows_mut() {
        let n = norm(row.view());
        if n > bound {
            row *= bound / n;
            changed = true;
        }
    }
    changed
}

/// Clips every trainable (layer-0) row to the model's bound. Rows already
/// inside the ball are left untouched. Returns whether any row changed.
pub fn apply_clipping(model: &mut EmbeddingModel) -> bool {
    let bound = model.clip_bound;
    if !bound.is_finite() {
        return false;
    }
    let changed_users = clip_rows(&mut model.user_emb, bound);
    let changed_items = clip_rows(&mut model.item_emb, bound);
    let changed = changed_users || changed_items;
    if changed {
        model.version += 1;
    }
    changed
}

const CHECKPOINT_MAGIC: &str = "PDERANK";
const CHECKPOINT_VERSION: &str = "1";

pub fn format_checkpoint(model: &EmbeddingModel) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {} {} {} {} {}",
        model.backbone,
        model.n_users(),
        model.n_items(),
        model.dim(),
        model.n_layers,
        model.clip_bound
    );
    for row in model
        .user_emb
        .rows()
        .into_iter()
        .chain(model.item_emb.rows())
    {
        let mut first = true;
        for v in row {
            if !first {
                out.push('\t');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn save_checkpoint(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str) -> Result<EmbeddingModel> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.first() != Some(&CHECKPOINT_MAGIC) {
        return Err(Error::Format("missing PDERANK magic".into()));
    }
    if let Some(&version) = fields.get(1) {
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version.to_string()));
        }
    }
    if fields.len() != 8 {
        return Err(Error::Format(format!(
            "header has {} fields, expected 8",
            fields.len()
        )));
    }
    let backbone: Backbone = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("unknown backbone {:?}", fields[2])))?;
    let count = |idx: usize| {
        fields[idx]
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad header field {:?}", fields[idx])))
    };
    let (n_users, n_items, d, n_layers) = (count(3)?, count(4)?, count(5)?, count(6)?);
    let clip_bound: f64 = fields[7]
        .parse()
        .map_err(|_| Error::Format(format!("bad clip bound {:?}", fields[7])))?;

    let mut read_table = |rows: usize| -> Result<Array2<f64>> {
        let mut values = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let line = lines.next().ok_or_else(|| {
                Error::Format(format!("truncated: expected {rows} rows, got {r}"))
            })?;
            let before = values.len();
            for tok in line.split('\t').filter(|t| !t.is_empty()) {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value {tok:?}")))?,
                );
            }
            if values.len() - before != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: values.len() - before,
                });
            }
        }
        Ok(Array2::from_shape_vec((rows, d), values).expect("row lengths checked"))
    };
    let user_emb = read_table(n_users)?;
    let item_emb = read_table(n_items)?;
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Format("trailing rows after item table".into()));
    }
    EmbeddingModel::from_tables(user_emb, item_emb, backbone, n_layers, clip_bound)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Reads a checkpoint. LGCN models come back without a graph; call
/// [`EmbeddingModel::attach_graph`] with the training split before scoring.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mf(users: Array2<f64>, items: Array2<f64>) -> EmbeddingModel {
        EmbeddingModel::from_tables(users, items, Backbone::Mf, 0, f64::INFINITY).unwrap()
    }

    #[test]
    fn orthogonal_and_parallel_scores() {
        let m = mf(
            array![[1.0, 0.0], [1.0, 1.0]],
            array![[0.0, 1.0], [1.0, 1.0]],
        );
        let p = propagate(&m).unwrap();
        assert_eq!(score(&m, &p, 0, 0).unwrap(), 0.0);
        assert_eq!(score(&m, &p, 1, 1).unwrap(), 2.0);
        assert!(matches!(score(&m, &p, 2, 0), Err(Error::Range { .. })));
        assert!(matches!(score(&m, &p, 0, 2), Err(Error::Range { .. })));
    }

    #[test]
    fn stale_snapshot_is_rejected() {
        let mut m = mf(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let p = propagate(&m).unwrap();
        m.tables_mut().0[[0, 0]] = 2.0;
        assert!(matches!(score(&m, &p, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_item_block() {
        let m = mf(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let p = propagate(&m).unwrap();
        let block = score_block(&m, &p, &[0], &[]).unwrap();
        assert_eq!(block.dim(), (1, 0));
        let one = score_block(&m, &p, &[0], &[0]).unwrap();
        assert_eq!(one[[0, 0]], score(&m, &p, 0, 0).unwrap());
    }

    #[test]
    fn clip_examples() {
        let v = clip_norm(&[3.0, 4.0], 1.0).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_norm(&[0.3, 0.0], 1.0).unwrap(), vec![0.3, 0.0]);
        assert_eq!(clip_norm(&[0.0, 0.0], 0.5).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(clip_norm(&[1.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(clip_norm(&[1.0], -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn clipping_leaves_small_rows_bitwise() {
        let users = array![[0.1, 0.2], [2.0, 0.0]];
        let items = array![[0.3, -0.4]];
        let mut m = EmbeddingModel::from_tables(users.clone(), items.clone(), Backbone::Mf, 0, 1.0)
            .unwrap();
        assert!(apply_clipping(&mut m));
        assert_eq!(m.user_emb().row(0), users.row(0));
        assert_eq!(m.item_emb(), items.view());
        assert!((norm(m.user_emb().row(1)) - 1.0).abs() < 1e-15);
        assert!(!apply_clipping(&mut m));
    }

    #[test]
    fn mf_refuses_graph_propagation() {
        let m = mf(array![[1.0]], array![[1.0]]);
        assert!(matches!(propagate_lgcn(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn single_edge_one_layer() {
        let ds = InteractionDataset::from_positives(1, 1, vec![vec![0]]).unwrap();
        let mut m = EmbeddingModel::from_tables(
            array![[1.0, 2.0]],
            array![[3.0, -1.0]],
            Backbone::Lgcn,
            1,
            f64::INFINITY,
        )
        .unwrap();
        m.attach_graph(&ds).unwrap();
        let p = propagate(&m).unwrap();
        assert_eq!(p.final_user, array![[2.0, 0.5]]);
        assert_eq!(p.final_item, array![[2.0, 0.5]]);
    }

    #[test]
    fn isolated_nodes_shrink_by_layers() {
        let ds = InteractionDataset::empty(1, 2);
        let mut m = EmbeddingModel::from_tables(
            array![[4.0, 8.0]],
            array![[1.0, 0.0], [0.0, -2.0]],
            Backbone::Lgcn,
            3,
            f64::INFINITY,
        )
        .unwrap();
        m.attach_graph(&ds).unwrap();
        let p = propagate(&m).unwrap();
        assert_eq!(p.final_user, array![[1.0, 2.0]]);
        assert_eq!(p.final_item, array![[0.25, 0.0], [0.0, -0.5]]);
    }

    #[test]
    fn lgcn_without_graph_is_contract_error() {
        let m = EmbeddingModel::from_tables(
            array![[1.0]],
            array![[1.0]],
            Backbone::Lgcn,
            2,
            f64::INFINITY,
        )
        .unwrap();
        assert!(matches!(propagate(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_header_errors() {
        let m = mf(array![[1.0, 0.5]], array![[0.25, -1.0], [3.0, 1e-300]]);
        let text = format_checkpoint(&m);
        assert!(text.starts_with("PDERANK 1 mf 1 2 2 0 inf\n"));
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back.user_emb(), m.user_emb());
        assert_eq!(back.item_emb(), m.item_emb());

        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            parse_checkpoint(&truncated),
            Err(Error::Format(_))
        ));
        let v2 = text.replacen("PDERANK 1", "PDERANK 2", 1);
        assert!(matches!(
            parse_checkpoint(&v2),
            Err(Error::UnsupportedVersion(v)) if v == "2"
        ));
        let wide = text.replacen(" 2 2 0 ", " 2 3 0 ", 1);
        assert!(matches!(
            parse_checkpoint(&wide),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(parse_checkpoint("NOPE 1"), Err(Error::Format(_))));
    }
}
