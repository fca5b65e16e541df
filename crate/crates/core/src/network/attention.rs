//! Fisheye positional embeddings, the learned map embedding and the
//! cross-view attention that lifts camera features onto the BEV grid.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Builder, Linear, Norm, ResBlock};
use crate::camera::{CameraName, ProjectionEncoding};
use crate::tensor::{sc, Graph, ParamId, ParamStore, Scalar, Tensor, TensorResult, Var};

/// `MLP(ray, camera)`: the camera identity enters as a learned embedding added
/// to the first hidden layer, which equals a one-hot input column.
#[derive(Debug, Clone, Copy)]
pub struct RayEmbedding {
    l1: Linear,
    camera: ParamId,
    l2: Linear,
}

impl RayEmbedding {
    fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, hidden: usize, out: usize) -> TensorResult<Self> {
        Ok(RayEmbedding {
            l1: b.linear_std("l1", 3, hidden, 1.5)?,
            camera: b.normal("camera", &[CameraName::ALL.len(), hidden], 0.5)?,
            l2: b.linear("l2", hidden, out)?,
        })
    }

    /// Embeds every ray of `enc` → `[rows·cols, out]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        enc: &ProjectionEncoding,
    ) -> TensorResult<Var> {
        let n = enc.rays.len();
        let flat: Vec<f64> = enc.rays.iter().flatten().copied().collect();
        let rays = g.constant(Tensor::from_f64(&[n, 3], &flat)?);
        let h = self.l1.forward(g, s, rays)?;
        let table = g.param(s, self.camera);
        let cam = g.embedding(table, &[enc.camera.index()])?;
        let h = g.add(h, cam)?;
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

/// Keys and values of one camera at one endpoint.
#[derive(Debug, Clone, Copy)]
struct KeyValue {
    pos: RayEmbedding,
    key: Linear,
    value: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Level {
    kv: KeyValue,
    q_norm: Norm,
    q: Linear,
    out: Linear,
    mlp_norm: Norm,
    mlp1: Linear,
    mlp2: Linear,
}

/// One endpoint of one camera, as consumed by the attention.
#[derive(Debug, Clone, Copy)]
pub struct CameraLevelInput<'a> {
    /// `[h, w, C]` feature map.
    pub features: Var,
    pub encoding: &'a ProjectionEncoding,
}

#[derive(Debug, Clone)]
pub struct CrossViewAttention {
    heads: usize,
    head_channels: usize,
    map_embedding: ParamId,
    coarse: Level,
    fine: Level,
    bottleneck: [ResBlock; 2],
    rows: usize,
    cols: usize,
}

/// Attention weights of the most recent forward pass, kept for inspection.
pub struct AttentionTrace {
    /// `[heads, queries, keys]` softmax output.
    pub weights: Var,
}

impl CrossViewAttention {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> TensorResult<Self> {
        let d = cfg.attention.channels();
        let hidden = cfg.attention.embed_hidden;
        let grid = cfg.bev;
        b.scope("bev", |b| {
            let map_embedding = map_embedding_init(b, &grid, hidden, d)?;
            let level = |b: &mut Builder<'_, T, R>, name: &str, cin: usize| {
                b.scope(name, |b| {
                    let kv = KeyValue {
                        pos: b.scope("pos", |b| RayEmbedding::build(b, hidden, d))?,
                        key: b.linear("key", cin, d)?,
                        value: b.linear("value", cin, d)?,
                    };
                    Ok(Level {
                        kv,
                        q_norm: b.norm("q_norm", d)?,
                        q: b.linear("q", d, d)?,
                        out: b.linear("out", d, d)?,
                        mlp_norm: b.norm("mlp_norm", d)?,
                        mlp1: b.linear("mlp1", d, d * cfg.attention.mlp_ratio)?,
                        mlp2: b.linear_std(
                            "mlp2",
                            d * cfg.attention.mlp_ratio,
                            d,
                            0.5 / ((d * cfg.attention.mlp_ratio) as f64).sqrt(),
                        )?,
                    })
                })
            };
            let coarse = level(b, "coarse", cfg.endpoints.coarse.channels)?;
            let fine = level(b, "fine", cfg.endpoints.fine.channels)?;
            let bottleneck = [b.res_block("bottleneck0", d)?, b.res_block("bottleneck1", d)?];
            Ok(CrossViewAttention {
                heads: cfg.attention.heads,
                head_channels: cfg.attention.head_channels,
                map_embedding,
                coarse,
                fine,
                bottleneck,
                rows: grid.rows,
                cols: grid.cols,
            })
        })
    }

    /// BEV features `[rows, cols, D]` from every camera's two endpoints.
    /// `coarse[i]` and `fine[i]` belong to the same camera.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        coarse: &[CameraLevelInput<'_>],
        fine: &[CameraLevelInput<'_>],
    ) -> TensorResult<Var> {
        Ok(self.forward_traced(g, s, coarse, fine)?.0)
    }

    /// Like [`Self::forward`] but also returns both levels' attention weights.
    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        coarse: &[CameraLevelInput<'_>],
        fine: &[CameraLevelInput<'_>],
    ) -> TensorResult<(Var, [AttentionTrace; 2])> {
        let q = g.param(s, self.map_embedding);
        let (q, tc) = self.level(g, s, &self.coarse, q, coarse)?;
        let (q, tf) = self.level(g, s, &self.fine, q, fine)?;
        let d = self.heads * self.head_channels;
        let mut x = g.reshape(q, &[self.rows, self.cols, d])?;
        for blk in &self.bottleneck {
            x = blk.forward(g, s, x)?;
        }
        Ok((x, [tc, tf]))
    }

    fn level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        lv: &Level,
        queries: Var,
        cams: &[CameraLevelInput<'_>],
    ) -> TensorResult<(Var, AttentionTrace)> {
        let (h, dh) = (self.heads, self.head_channels);
        let d = h * dh;
        let nq = self.rows * self.cols;
        let mut keys = Vec::with_capacity(cams.len());
        let mut values = Vec::with_capacity(cams.len());
        let mut mask = Vec::new();
        for cam in cams {
            let shape = g.shape(cam.features).to_vec();
            let n = shape[0] * shape[1];
            if n != cam.encoding.rays.len() {
                return Err(crate::tensor::TensorError::ShapeMismatch {
                    op: "cross_view_attention",
                    lhs: shape,
                    rhs: vec![cam.encoding.rows, cam.encoding.cols],
                });
            }
            let f = g.reshape(cam.features, &[n, shape[2]])?;
            let pos = lv.kv.pos.forward(g, s, cam.encoding)?;
            let k = lv.kv.key.forward(g, s, f)?;
            keys.push(g.add(k, pos)?);
            values.push(lv.kv.value.forward(g, s, f)?);
            mask.extend_from_slice(&cam.encoding.valid);
        }
        let nk = mask.len();
        let k = g.concat(&keys, 0)?;
        let v = g.concat(&values, 0)?;
        // [n, d] → [heads, n, dh]
        let split = |g: &mut Graph<T>, x: Var, n: usize| -> TensorResult<Var> {
            let x = g.reshape(x, &[n, h, dh])?;
            g.transpose(x, 0, 1)
        };
        let qn = lv.q_norm.forward(g, s, queries)?;
        let qp = lv.q.forward(g, s, qn)?;
        let qh = split(g, qp, nq)?;
        let kh = split(g, k, nk)?;
        let vh = split(g, v, nk)?;
        let scores = g.matmul_ext(qh, kh, true)?;
        let scores = g.scale(scores, sc(1.0 / (dh as f64).sqrt()));
        let weights = g.softmax(scores, Some(mask))?;
        let o = g.matmul(weights, vh)?; // [heads, nq, dh]
        let o = g.transpose(o, 0, 1)?;
        let o = g.reshape(o, &[nq, d])?;
        let o = lv.out.forward(g, s, o)?;
        let x = g.add(queries, o)?;
        let m = lv.mlp_norm.forward(g, s, x)?;
        let m = lv.mlp1.forward(g, s, m)?;
        let m = g.gelu(m);
        let m = lv.mlp2.forward(g, s, m)?;
        let x = g.add(x, m)?;
        Ok((x, AttentionTrace { weights }))
    }
}

/// Learned per-cell queries initialized from a fixed random MLP of the
/// normalized cell-center coordinates.
fn map_embedding_init<T: Scalar, R: Rng>(
    b: &mut Builder<'_, T, R>,
    grid: &crate::types::BevGridSpec,
    hidden: usize,
    d: usize,
) -> TensorResult<ParamId> {
    use rand_distr::{Distribution, Normal};
    let n1 = Normal::new(0.0, 2.0).unwrap();
    let w1: Vec<f64> = (0..2 * hidden).map(|_| n1.sample(b.rng)).collect();
    let b1: Vec<f64> = (0..hidden).map(|_| n1.sample(b.rng)).collect();
    let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
    let w2: Vec<f64> = (0..hidden * d).map(|_| n2.sample(b.rng)).collect();
    let mut data = Vec::with_capacity(grid.cells() * d);
    let mut hbuf = vec![0.0; hidden];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.cell_center(r, c);
            let x = [p[0] / grid.half_x(), p[1] / grid.half_y()];
            for j in 0..hidden {
                let z = x[0] * w1[j] + x[1] * w1[hidden + j] + b1[j];
                hbuf[j] = z.tanh();
            }
            for k in 0..d {
                data.push((0..hidden).map(|j| hbuf[j] * w2[j * d + k]).sum::<f64>());
            }
        }
    }
    let t = Tensor::from_f64(&[grid.cells(), d], &data)?;
    b.scope("map_embedding", |b| {
        let id = b.constant("value", &[grid.cells(), d], 0.0)?;
        b.store.get_mut(id).value = t;
        Ok(id)
    })
}
