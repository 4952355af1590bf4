use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::batch_loss_grad;
use super::{ModelConfig, Variant};
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, matmul, Params, Real, Segments, SequenceEncoder, SequenceEncoderCache};
use crate::{Error, Result};

/// Frozen backbone features of one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures<T> {
    /// `h_I`.
    pub instruction: Array1<T>,
    /// One row per extracted phrase (unmasked slots only), at least one row.
    pub phrases: Array2<T>,
}

/// Frozen backbone features of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFeatures<T> {
    /// `h_t`.
    pub target: Array1<T>,
    /// `(n_c, hidden)`, nearest view first.
    pub context: Array2<T>,
    /// Embedding of the resized horizontal context strip; baseline only.
    pub strip: Option<Array1<T>>,
}

impl<T: Real> QueryFeatures<T> {
    pub fn cast<U: Real>(&self) -> QueryFeatures<U> {
        QueryFeatures {
            instruction: self.instruction.mapv(|v| U::c(v.to_f64().unwrap())),
            phrases: self.phrases.mapv(|v| U::c(v.to_f64().unwrap())),
        }
    }
}

impl<T: Real> CandidateFeatures<T> {
    pub fn cast<U: Real>(&self) -> CandidateFeatures<U> {
        CandidateFeatures {
            target: self.target.mapv(|v| U::c(v.to_f64().unwrap())),
            context: self.context.mapv(|v| U::c(v.to_f64().unwrap())),
            strip: self.strip.as_ref().map(|s| s.mapv(|v| U::c(v.to_f64().unwrap()))),
        }
    }
}

/// Instruction side of the head, computed once per query.
///
/// For MultiRankIt each row is `[pooled; h_I] W_pi + b`; for the baseline it
/// is `h_I` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoding<T> {
    pub rows: Array2<T>,
}

/// Candidate side, computable ahead of any query: `h_t W_t` and `h_targ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEncoding<T> {
    pub target_proj: Array2<T>,
    pub targ: Array2<T>,
}

impl<T: Clone> CandidateEncoding<T> {
    pub fn len(&self) -> usize {
        self.targ.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> CandidateEncoding<T> {
        CandidateEncoding {
            target_proj: self.target_proj.select(Axis(0), idx),
            targ: self.targ.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRankIt<T> {
    pub cnpe: SequenceEncoder<T>,
    pub crfe: SequenceEncoder<T>,
    /// `(3H, H)`: rows `0..H` take the pooled phrases, `H..2H` take `h_I`,
    /// `2H..3H` take `h_t`.
    pub head: Linear<T>,
    pub head_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline<T> {
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net<T> {
    MultiRankIt(MultiRankIt<T>),
    Baseline(Baseline<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub net: Net<T>,
}

pub struct QueryCache<T> {
    cnpe: Option<SequenceEncoderCache<T>>,
    input: Array2<T>,
}

pub struct CandidateCache<T> {
    crfe: Option<SequenceEncoderCache<T>>,
    targets: Array2<T>,
    baseline: Option<(Array2<T>, Array2<T>, Array2<T>)>,
}

pub struct ScoreCache<T> {
    bq: usize,
    bc: usize,
    norm: Option<LayerNormCache<T>>,
    normed: Array2<T>,
    inst: Array2<T>,
    targ: Array2<T>,
    scores: Array2<T>,
}

fn rows<'a, T: Real>(vs: impl Iterator<Item = ArrayView1<'a, T>>, n: usize, dim: usize) -> Array2<T> {
    let mut out = Array2::zeros((n, dim));
    for (mut r, v) in out.rows_mut().into_iter().zip(vs) {
        r.assign(&v);
    }
    out
}

fn dot<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let net = match config.variant {
            Variant::Baseline => Net::Baseline(Baseline {
                mlp1: Linear::new(&mut rng, 2 * h, h),
                mlp2: Linear::new(&mut rng, h, h),
            }),
            _ => Net::MultiRankIt(MultiRankIt {
                cnpe: SequenceEncoder::new(&mut rng, config.n_p_max, h, config.heads, config.ff, config.l_inst),
                crfe: SequenceEncoder::new(&mut rng, config.n_c + 1, h, config.heads, config.ff, config.l_img),
                head: Linear::new(&mut rng, 3 * h, h),
                head_norm: LayerNorm::new(h),
            }),
        };
        Ok(Model { config, net })
    }

    /// Same shapes, every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let net = match &self.net {
            Net::Baseline(b) => Net::Baseline(Baseline { mlp1: b.mlp1.zeros_like(), mlp2: b.mlp2.zeros_like() }),
            Net::MultiRankIt(m) => Net::MultiRankIt(MultiRankIt {
                cnpe: m.cnpe.zeros_like(),
                crfe: m.crfe.zeros_like(),
                head: m.head.zeros_like(),
                head_norm: m.head_norm.zeros_like(),
            }),
        };
        Model { config: self.config.clone(), net }
    }

    pub fn parameter_count(&self) -> usize {
        self.count()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut v = Vec::new();
        self.params(&mut v);
        v.concat()
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.count(),
                values.len()
            )));
        }
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        let mut at = 0;
        for p in ps {
            p.copy_from_slice(&values[at..at + p.len()]);
            at += p.len();
        }
        Ok(())
    }

    fn check_query(&self, q: &QueryFeatures<T>) -> Result<()> {
        let h = self.config.hidden;
        if q.instruction.len() != h {
            return Err(Error::Shape(format!("instruction embedding has {} values, expected {h}", q.instruction.len())));
        }
        if self.config.variant == Variant::Baseline {
            return Ok(());
        }
        if q.phrases.nrows() == 0 {
            return Err(Error::Shape("every phrase slot is masked".into()));
        }
        if q.phrases.nrows() > self.config.n_p_max || q.phrases.ncols() != h {
            return Err(Error::Shape(format!(
                "phrase matrix is {}x{}, expected at most {}x{h}",
                q.phrases.nrows(),
                q.phrases.ncols(),
                self.config.n_p_max
            )));
        }
        Ok(())
    }

    fn check_candidate(&self, c: &CandidateFeatures<T>) -> Result<()> {
        let h = self.config.hidden;
        if c.target.len() != h {
            return Err(Error::Shape(format!("target embedding has {} values, expected {h}", c.target.len())));
        }
        if c.context.nrows() != self.config.n_c || c.context.ncols() != h {
            return Err(Error::Shape(format!(
                "context matrix is {}x{}, expected {}x{h}",
                c.context.nrows(),
                c.context.ncols(),
                self.config.n_c
            )));
        }
        if self.config.variant == Variant::Baseline {
            match &c.strip {
                Some(s) if s.len() == h => {}
                Some(s) => return Err(Error::Shape(format!("strip embedding has {} values, expected {h}", s.len()))),
                None => return Err(Error::Shape("baseline needs the context strip embedding".into())),
            }
        }
        Ok(())
    }

    pub fn encode_queries(&self, qs: &[&QueryFeatures<T>]) -> Result<QueryEncoding<T>> {
        self.encode_queries_cached(qs).map(|(e, _)| e)
    }

    pub fn encode_queries_cached(&self, qs: &[&QueryFeatures<T>]) -> Result<(QueryEncoding<T>, QueryCache<T>)> {
        for q in qs {
            self.check_query(q)?;
        }
        let h = self.config.hidden;
        let instr = rows(qs.iter().map(|q| q.instruction.view()), qs.len(), h);
        match &self.net {
            Net::Baseline(_) => Ok((
                QueryEncoding { rows: instr.clone() },
                QueryCache { cnpe: None, input: instr },
            )),
            Net::MultiRankIt(m) => {
                let (pooled, cache) = if self.config.variant == Variant::NoCnpe {
                    (Array2::zeros((qs.len(), h)), None)
                } else {
                    let views: Vec<ArrayView2<T>> = qs.iter().map(|q| q.phrases.view()).collect();
                    let x = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
                    let seg = Segments::from_lengths(qs.iter().map(|q| q.phrases.nrows()));
                    let (p, c) = m.cnpe.forward(x, seg);
                    (p, Some(c))
                };
                let input = concatenate(Axis(1), &[pooled.view(), instr.view()]).expect("same row count");
                let a = matmul(input.view(), m.head.w.slice(s![..2 * h, ..])) + &m.head.b;
                Ok((QueryEncoding { rows: a }, QueryCache { cnpe: cache, input }))
            }
        }
    }

    pub fn encode_candidates(&self, cs: &[&CandidateFeatures<T>]) -> Result<CandidateEncoding<T>> {
        self.encode_candidates_cached(cs).map(|(e, _)| e)
    }

    pub fn encode_candidates_cached(
        &self,
        cs: &[&CandidateFeatures<T>],
    ) -> Result<(CandidateEncoding<T>, CandidateCache<T>)> {
        for c in cs {
            self.check_candidate(c)?;
        }
        let h = self.config.hidden;
        let targets = rows(cs.iter().map(|c| c.target.view()), cs.len(), h);
        match &self.net {
            Net::Baseline(b) => {
                let strips = rows(cs.iter().map(|c| c.strip.as_ref().unwrap().view()), cs.len(), h);
                let input = concatenate(Axis(1), &[targets.view(), strips.view()]).expect("same row count");
                let pre = b.mlp1.forward(input.view());
                let act = pre.mapv(gelu);
                let targ = b.mlp2.forward(act.view());
                Ok((
                    CandidateEncoding { target_proj: Array2::zeros((cs.len(), 0)), targ },
                    CandidateCache { crfe: None, targets, baseline: Some((input, pre, act)) },
                ))
            }
            Net::MultiRankIt(m) => {
                let len = if self.config.variant == Variant::NoContext { 1 } else { self.config.n_c + 1 };
                let mut x = Array2::zeros((cs.len() * len, h));
                for (i, c) in cs.iter().enumerate() {
                    x.row_mut(i * len).assign(&c.target);
                    if len > 1 {
                        x.slice_mut(s![i * len + 1..(i + 1) * len, ..]).assign(&c.context);
                    }
                }
                let (targ, cache) = m.crfe.forward(x, Segments::from_lengths(std::iter::repeat_n(len, cs.len())));
                let target_proj = targets.dot(&m.head.w.slice(s![2 * h.., ..]));
                Ok((
                    CandidateEncoding { target_proj, targ },
                    CandidateCache { crfe: Some(cache), targets, baseline: None },
                ))
            }
        }
    }

    /// Score of every query against every candidate, `(queries, candidates)`.
    pub fn scores(&self, q: &QueryEncoding<T>, c: &CandidateEncoding<T>) -> Result<Array2<T>> {
        self.scores_cached(q, c).map(|s| s.scores)
    }

    pub fn scores_cached(&self, q: &QueryEncoding<T>, c: &CandidateEncoding<T>) -> Result<ScoreCache<T>> {
        let bq = q.rows.nrows();
        let bc = c.targ.nrows();
        let (norm, normed, inst) = match &self.net {
            Net::Baseline(_) => {
                let mut inst = Array2::zeros((bq * bc, q.rows.ncols()));
                for i in 0..bq {
                    for j in 0..bc {
                        inst.row_mut(i * bc + j).assign(&q.rows.row(i));
                    }
                }
                (None, Array2::zeros((0, 0)), inst)
            }
            Net::MultiRankIt(m) => {
                let mut z = Array2::zeros((bq * bc, q.rows.ncols()));
                for i in 0..bq {
                    for j in 0..bc {
                        let mut r = z.row_mut(i * bc + j);
                        r.assign(&q.rows.row(i));
                        r += &c.target_proj.row(j);
                    }
                }
                let (normed, cache) = m.head_norm.forward(z.view());
                let inst = normed.mapv(gelu);
                (Some(cache), normed, inst)
            }
        };
        let mut scores = Array2::zeros((bq, bc));
        for i in 0..bq {
            for j in 0..bc {
                let u = inst.row(i * bc + j);
                let v = c.targ.row(j);
                let nu = dot(u, u).sqrt();
                let nv = dot(v, v).sqrt();
                if nu == T::zero() || nv == T::zero() {
                    return Err(Error::Numeric("zero-norm embedding in cosine similarity".into()));
                }
                let s = dot(u, v) / (nu * nv);
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score for query {i}, candidate {j}")));
                }
                scores[[i, j]] = s.max(-T::one()).min(T::one());
            }
        }
        Ok(ScoreCache { bq, bc, norm, normed, inst, targ: c.targ.clone(), scores })
    }

    /// Scores for the paired batch `(qs[i], cs[i])`, the loss, and parameter
    /// gradients accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        qs: &[&QueryFeatures<T>],
        cs: &[&CandidateFeatures<T>],
        grads: &mut Model<T>,
    ) -> Result<T> {
        if qs.len() != cs.len() {
            return Err(Error::Shape(format!("{} queries but {} candidates", qs.len(), cs.len())));
        }
        let (qe, qc) = self.encode_queries_cached(qs)?;
        let (ce, cc) = self.encode_candidates_cached(cs)?;
        let sc = self.scores_cached(&qe, &ce)?;
        let (loss, ds) = batch_loss_grad(sc.scores.view(), self.config.temperature)?;
        self.backward(&qc, &cc, &sc, ds.view(), grads);
        Ok(loss)
    }

    /// Back-propagates `dL/dS` through scoring and both encoders.
    pub fn backward(
        &self,
        qc: &QueryCache<T>,
        cc: &CandidateCache<T>,
        sc: &ScoreCache<T>,
        ds: ArrayView2<T>,
        grads: &mut Model<T>,
    ) {
        let (bq, bc) = (sc.bq, sc.bc);
        let hdim = sc.targ.ncols();
        let mut dinst = Array2::zeros((bq * bc, hdim));
        let mut dtarg = Array2::<T>::zeros((bc, hdim));
        for i in 0..bq {
            for j in 0..bc {
                let g = ds[[i, j]];
                if g == T::zero() {
                    continue;
                }
                let u = sc.inst.row(i * bc + j);
                let v = sc.targ.row(j);
                let nu = dot(u, u).sqrt();
                let nv = dot(v, v).sqrt();
                let s = dot(u, v) / (nu * nv);
                let inv = T::one() / (nu * nv);
                let mut du = dinst.row_mut(i * bc + j);
                for k in 0..hdim {
                    du[k] = g * (v[k] * inv - s * u[k] / (nu * nu));
                }
                let mut dv = dtarg.row_mut(j);
                for k in 0..hdim {
                    dv[k] += g * (u[k] * inv - s * v[k] / (nv * nv));
                }
            }
        }
        match (&self.net, &mut grads.net) {
            (Net::Baseline(b), Net::Baseline(gb)) => {
                let (input, pre, act) = cc.baseline.as_ref().expect("baseline cache");
                let dact = b.mlp2.backward(act.view(), dtarg.view(), &mut gb.mlp2);
                let dpre = dact * &pre.mapv(gelu_grad);
                b.mlp1.accumulate(input.view(), dpre.view(), &mut gb.mlp1);
            }
            (Net::MultiRankIt(m), Net::MultiRankIt(gm)) => {
                let dnormed = dinst * &sc.normed.mapv(gelu_grad);
                let dz = m.head_norm.backward(sc.norm.as_ref().unwrap(), dnormed.view(), &mut gm.head_norm);
                let mut dq = Array2::<T>::zeros((bq, hdim));
                let mut dc = Array2::<T>::zeros((bc, hdim));
                for i in 0..bq {
                    for j in 0..bc {
                        let r = dz.row(i * bc + j);
                        let mut a = dq.row_mut(i);
                        a += &r;
                        let mut c = dc.row_mut(j);
                        c += &r;
                    }
                }
                let h = hdim;
                {
                    let mut gw = gm.head.w.slice_mut(s![..2 * h, ..]);
                    gw += &qc.input.t().dot(&dq);
                }
                gm.head.b += &dq.sum_axis(Axis(0));
                {
                    let mut gw = gm.head.w.slice_mut(s![2 * h.., ..]);
                    gw += &cc.targets.t().dot(&dc);
                }
                if let Some(cache) = &qc.cnpe {
                    let dpooled = dq.dot(&m.head.w.slice(s![..h, ..]).t());
                    m.cnpe.backward(cache, dpooled.view(), &mut gm.cnpe);
                }
                m.crfe.backward(cc.crfe.as_ref().unwrap(), dtarg.view(), &mut gm.crfe);
            }
            _ => unreachable!("gradient buffer has a different variant"),
        }
    }
}

impl<T> Params<T> for Model<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        match &self.net {
            Net::Baseline(b) => {
                b.mlp1.params(out);
                b.mlp2.params(out);
            }
            Net::MultiRankIt(m) => {
                m.cnpe.params(out);
                m.crfe.params(out);
                m.head.params(out);
                m.head_norm.params(out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        match &mut self.net {
            Net::Baseline(b) => {
                b.mlp1.params_mut(out);
                b.mlp2.params_mut(out);
            }
            Net::MultiRankIt(m) => {
                m.cnpe.params_mut(out);
                m.crfe.params_mut(out);
                m.head.params_mut(out);
                m.head_norm.params_mut(out);
            }
        }
    }
}
