//! Encoder/decoder forecaster built from stacked GCMem layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gcmem::{
    gcmem_forward, select_memory, static_graph_terms, AdaptiveAdjacency, GcMemLayer, LayerMemory,
    MemoryBank, Supports,
};
use crate::numcore::{
    gru_cell, BnMode, BnStats, GatherRows, GruParams, HasParams, ParamId, ParamStore, Tape, Tensor,
    Var,
};
use crate::patterns::{MatchResult, PatternSet};
use crate::train::data::{SeriesDataset, ZScore, SLOTS_PER_DAY};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input window length T'.
    pub t_in: usize,
    /// Forecast horizon T.
    pub t_out: usize,
    pub d_h: usize,
    pub layers: usize,
    pub k: usize,
    pub num_patterns: usize,
    pub heads: usize,
    /// Width of the adaptive-adjacency node embeddings.
    pub d_e: usize,
    pub seed: u64,
    pub simple_mem: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_in: 18,
            t_out: 18,
            d_h: 128,
            layers: 3,
            k: 3,
            num_patterns: 1000,
            heads: 4,
            d_e: 10,
            seed: 0,
            simple_mem: false,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 10] = [
        "t_in",
        "t_out",
        "d_h",
        "layers",
        "k",
        "num_patterns",
        "heads",
        "d_e",
        "seed",
        "simple_mem",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("d_h", self.d_h),
            ("layers", self.layers),
            ("k", self.k),
            ("num_patterns", self.num_patterns),
            ("heads", self.heads),
            ("d_e", self.d_e),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "t_in" => self.t_in = num(key, value)?,
            "t_out" => self.t_out = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "num_patterns" => self.num_patterns = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "simple_mem" => self.simple_mem = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("t_in", self.t_in.to_string()),
            ("t_out", self.t_out.to_string()),
            ("d_h", self.d_h.to_string()),
            ("layers", self.layers.to_string()),
            ("k", self.k.to_string()),
            ("num_patterns", self.num_patterns.to_string()),
            ("heads", self.heads.to_string()),
            ("d_e", self.d_e.to_string()),
            ("seed", self.seed.to_string()),
            ("simple_mem", self.simple_mem.to_string()),
        ]
    }
}

/// Model-ready inputs for a batch of windows. Rows stack `windows` blocks of
/// `nodes` rows.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub windows: usize,
    pub nodes: usize,
    /// Per row.
    pub matches: Vec<MatchResult>,
    /// Per window: the time-of-day slot of every input step.
    pub slots: Vec<Vec<usize>>,
    /// `rows x T'`, pattern residual divided by σ_z.
    pub noise: Tensor,
    /// `rows x 1`, last observed speed, normalized.
    pub last: Tensor,
}

impl ModelInput {
    /// Builds inputs for windows whose first input step is each of `starts`.
    /// Runs the k-NN match once per node and window.
    pub fn from_dataset(
        dataset: &SeriesDataset,
        zscore: &ZScore,
        patterns: &PatternSet,
        k: usize,
        t_in: usize,
        starts: &[usize],
    ) -> Result<Self> {
        if patterns.t_prime() != t_in {
            return Err(Error::invalid(format!(
                "pattern length {} does not match input window {t_in}",
                patterns.t_prime()
            )));
        }
        let n = dataset.num_nodes();
        let rows = starts.len() * n;
        let mut matches = Vec::with_capacity(rows);
        let mut noise = Tensor::zeros(rows, t_in);
        let mut last = Tensor::zeros(rows, 1);
        let mut slots = Vec::with_capacity(starts.len());
        for (b, &s) in starts.iter().enumerate() {
            if s + t_in > dataset.len() {
                return Err(Error::invalid(format!(
                    "window at {s} runs past the series end {}",
                    dataset.len()
                )));
            }
            slots.push(dataset.slots()[s..s + t_in].to_vec());
            for node in 0..n {
                let window = &dataset.speed(node)[s..s + t_in];
                if window.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "input window at {s} for node {} has missing values; fill them first",
                        dataset.node_ids()[node]
                    )));
                }
                let r = b * n + node;
                let m = patterns.knn_match(window, k)?;
                for (dst, &v) in noise.row_mut(r).iter_mut().zip(&m.noise) {
                    *dst = v / zscore.std;
                }
                last.set(r, 0, zscore.apply(window[t_in - 1]));
                matches.push(m);
            }
        }
        Ok(ModelInput {
            windows: starts.len(),
            nodes: n,
            matches,
            slots,
            noise,
            last,
        })
    }

    pub fn rows(&self) -> usize {
        self.windows * self.nodes
    }
}

/// Normalized targets for a batch, masked where the raw data was missing.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `rows x T`
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl Targets {
    pub fn from_dataset(
        dataset: &SeriesDataset,
        zscore: &ZScore,
        t_in: usize,
        t_out: usize,
        starts: &[usize],
    ) -> Result<Self> {
        let n = dataset.num_nodes();
        let mut values = Tensor::zeros(starts.len() * n, t_out);
        let mut mask = Vec::with_capacity(values.len());
        for (b, &s) in starts.iter().enumerate() {
            if s + t_in + t_out > dataset.len() {
                return Err(Error::invalid(format!("target window at {s} runs past the series end")));
            }
            for node in 0..n {
                let r = b * n + node;
                let speed = &dataset.speed(node)[s + t_in..s + t_in + t_out];
                let obs = &dataset.observed(node)[s + t_in..s + t_in + t_out];
                for h in 0..t_out {
                    let ok = obs[h] && speed[h].is_finite();
                    if ok {
                        values.set(r, h, zscore.apply(speed[h]));
                    }
                    mask.push(ok);
                }
            }
        }
        Ok(Targets { values, mask })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `rows x horizon`, normalized.
    pub pred: Var,
    /// Per decoder step, `rows x L` layer weights.
    pub alphas: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub(crate) config: ModelConfig,
    pub(crate) num_nodes: usize,
    pub(crate) store: ParamStore,
    pub(crate) emb: ParamId,
    pub(crate) w_noise: ParamId,
    pub(crate) bank: MemoryBank,
    pub(crate) enc: Vec<GcMemLayer>,
    pub(crate) dec: Vec<GcMemLayer>,
    pub(crate) adaptive: Option<AdaptiveAdjacency>,
    pub(crate) gru: GruParams,
    pub(crate) dec_score: Vec<ParamId>,
    pub(crate) w_proj: ParamId,
    pub(crate) a_norm: Tensor,
    /// Encoder layers first, then decoder layers.
    pub(crate) bn: Vec<BnStats>,
    pub(crate) zscore: ZScore,
}

impl HasParams for ForecastModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ForecastModel {
    /// `a_norm` is the row-normalized `N x N` road adjacency.
    pub fn new(config: ModelConfig, a_norm: Tensor, zscore: ZScore) -> Result<Self> {
        config.validate()?;
        let n = a_norm.rows();
        if a_norm.cols() != n || n == 0 {
            return Err(Error::shape("model", format!("adjacency {:?}", a_norm.shape())));
        }
        let d = config.d_h;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let emb = store.add_xavier("time_embedding", SLOTS_PER_DAY, d, &mut rng)?;
        let w_noise = store.add_xavier("noise_proj", config.t_in, d, &mut rng)?;
        let bank = MemoryBank::init(&mut store, config.layers, config.num_patterns, d, &mut rng)?;
        let adaptive = if config.simple_mem {
            None
        } else {
            Some(AdaptiveAdjacency::init(&mut store, n, config.d_e, &mut rng)?)
        };
        let mut stack = |store: &mut ParamStore, tag: &str| -> Result<Vec<GcMemLayer>> {
            (0..config.layers)
                .map(|l| {
                    GcMemLayer::init(store, &format!("{tag}.{l}"), config.heads, d, config.simple_mem, &mut rng)
                })
                .collect()
        };
        let enc = stack(&mut store, "enc")?;
        let dec = stack(&mut store, "dec")?;
        let gru = GruParams::init(&mut store, "gru", 1, d, &mut rng)?;
        let dec_score = (0..config.layers)
            .map(|l| store.add_xavier(format!("dec_score.{l}"), d, d, &mut rng))
            .collect::<Result<_>>()?;
        let w_proj = store.add_xavier("proj", d, 1, &mut rng)?;
        let bn = vec![BnStats::new(d); 2 * config.layers];
        Ok(ForecastModel {
            config,
            num_nodes: n,
            store,
            emb,
            w_noise,
            bank,
            enc,
            dec,
            adaptive,
            gru,
            dec_score,
            w_proj,
            a_norm,
            bn,
            zscore,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn zscore(&self) -> &ZScore {
        &self.zscore
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    /// Errors unless `patterns` fits the memory bank and input window.
    pub fn check_patterns(&self, patterns: &PatternSet) -> Result<()> {
        if patterns.len() != self.config.num_patterns || patterns.t_prime() != self.config.t_in {
            return Err(Error::invalid(format!(
                "pattern bank has {} keys of length {}, model expects {} of length {}",
                patterns.len(),
                patterns.t_prime(),
                self.config.num_patterns,
                self.config.t_in
            )));
        }
        Ok(())
    }

    /// Inference forward pass with frozen batch-norm statistics.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput, horizon: usize) -> Result<ForwardOutput> {
        let mut bn = self.bn.clone();
        self.forward_with(tape, input, horizon, BnMode::Eval, &mut bn)
    }

    /// Training forward pass: batch statistics, running statistics updated.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        input: &ModelInput,
        horizon: usize,
    ) -> Result<ForwardOutput> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_with(tape, input, horizon, BnMode::Train, &mut bn);
        self.bn = bn;
        out
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        horizon: usize,
        mode: BnMode,
        bn: &mut [BnStats],
    ) -> Result<ForwardOutput> {
        let (blocks, n, layers) = (input.windows, input.nodes, self.config.layers);
        if n != self.num_nodes || input.noise.cols() != self.config.t_in {
            return Err(Error::shape(
                "model input",
                format!(
                    "{n} nodes x {} steps, model wants {} x {}",
                    input.noise.cols(),
                    self.num_nodes,
                    self.config.t_in
                ),
            ));
        }
        let s = &self.store;
        let scale = 1.0 / (self.config.d_h as f64).sqrt();

        // encoder input: summed time-of-day embeddings plus projected noise
        let gather: GatherRows = (0..input.rows())
            .map(|r| input.slots[r / n].iter().map(|&t| (t % SLOTS_PER_DAY, 1.0)).collect())
            .collect();
        let emb = tape.param(s, self.emb);
        let h_time = tape.weighted_gather(emb, gather)?;
        let noise = tape.constant(input.noise.clone())?;
        let w_n = tape.param(s, self.w_noise);
        let h_noise = tape.matmul(noise, w_n)?;
        let mut h = tape.add(h_time, h_noise)?;

        let memories = self
            .bank
            .banks
            .iter()
            .map(|&b| select_memory(tape, s, b, &input.matches))
            .collect::<Result<Vec<_>>>()?;
        let supports = Supports {
            a_norm: tape.constant(self.a_norm.clone())?,
            adaptive: match &self.adaptive {
                Some(a) => Some(a.forward(tape, s)?),
                None => None,
            },
        };
        let layer_memory = |tape: &mut Tape, layer: &GcMemLayer, l: usize| -> Result<LayerMemory> {
            Ok(LayerMemory {
                current: memories[l],
                next: memories[l + 1],
                static_terms: static_graph_terms(tape, s, layer, memories[l + 1], &supports, blocks)?,
            })
        };

        let (bn_enc, bn_dec) = bn.split_at_mut(layers);
        for (l, layer) in self.enc.iter().enumerate() {
            let mem = layer_memory(tape, layer, l)?;
            h = gcmem_forward(tape, s, layer, &mut bn_enc[l], &mem, h, blocks, mode)?.hidden;
        }

        let dec_mem = self
            .dec
            .iter()
            .enumerate()
            .map(|(l, layer)| layer_memory(tape, layer, l))
            .collect::<Result<Vec<_>>>()?;
        let keys = (0..layers)
            .map(|l| {
                let w = tape.param(s, self.dec_score[l]);
                tape.matmul(memories[l], w)
            })
            .collect::<Result<Vec<_>>>()?;
        let w_proj = tape.param(s, self.w_proj);

        let mut state = h;
        let mut x = tape.constant(input.last.clone())?;
        let mut preds = Vec::with_capacity(horizon);
        let mut alphas = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            state = gru_cell(tape, s, &self.gru, x, state)?;
            let mut h = state;
            let mut energies = Vec::with_capacity(layers);
            let mut outs = Vec::with_capacity(layers);
            for (l, layer) in self.dec.iter().enumerate() {
                let e = tape.row_dot(h, keys[l])?;
                energies.push(tape.scale(e, scale)?);
                let out = gcmem_forward(tape, s, layer, &mut bn_dec[l], &dec_mem[l], h, blocks, mode)?;
                outs.push(tape.matmul(out.conv, w_proj)?);
                h = out.hidden;
            }
            let e = tape.concat_cols(&energies)?;
            let alpha = tape.softmax_rows(e)?;
            let o = tape.concat_cols(&outs)?;
            let y = tape.row_dot(alpha, o)?;
            alphas.push(tape.value(alpha).clone());
            preds.push(y);
            x = y;
        }
        let pred = if preds.is_empty() {
            tape.constant(Tensor::zeros(input.rows(), 0))?
        } else {
            tape.concat_cols(&preds)?
        };
        Ok(ForwardOutput { pred, alphas })
    }

    /// Forecasts `horizon` steps after the window starting at `start`, in
    /// speed units, `N x horizon`.
    pub fn forecast(
        &self,
        dataset: &SeriesDataset,
        patterns: &PatternSet,
        start: usize,
        horizon: usize,
    ) -> Result<Tensor> {
        self.check_patterns(patterns)?;
        let input = ModelInput::from_dataset(dataset, &self.zscore, patterns, self.config.k, self.config.t_in, &[start])?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &input, horizon)?;
        Ok(tape.value(out.pred).map(|z| self.zscore.invert(z)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, softmax, Coords};
    use crate::patterns::normalize_zero_based;
    use chrono::{Duration, NaiveDate};
    use rand::Rng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            t_in: 4,
            t_out: 2,
            d_h: 8,
            layers: 2,
            k: 2,
            num_patterns: 6,
            heads: 2,
            d_e: 3,
            seed: 7,
            simple_mem: false,
        }
    }

    fn dataset(n: usize, len: usize, seed: u64) -> SeriesDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let ts = (0..len).map(|i| t0 + Duration::minutes(5 * i as i64)).collect();
        let speed = (0..n)
            .map(|i| (0..len).map(|t| 50.0 + 10.0 * ((t + 3 * i) as f64 * 0.3).sin() + rng.gen_range(-2.0..2.0)).collect())
            .collect();
        SeriesDataset::new((0..n).map(|i| format!("n{i}")).collect(), ts, speed).unwrap()
    }

    fn patterns(t: usize, count: usize, seed: u64) -> PatternSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = (0..count)
            .map(|_| normalize_zero_based(&(0..t).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>()))
            .collect();
        PatternSet::new(t, ps).unwrap()
    }

    fn adjacency(n: usize) -> Tensor {
        let mut a = Tensor::eye(n);
        for i in 0..n {
            a.set(i, (i + 1) % n, 0.5);
        }
        crate::graph::normalize_adjacency(&a)
    }

    fn setup(cfg: ModelConfig) -> (ForecastModel, SeriesDataset, PatternSet) {
        let ds = dataset(3, 40, 1);
        let model = ForecastModel::new(cfg.clone(), adjacency(3), ZScore::new(50.0, 8.0).unwrap()).unwrap();
        (model, ds, patterns(cfg.t_in, cfg.num_patterns, 2))
    }

    #[test]
    fn zero_model_predicts_the_mean() {
        let (mut model, ds, ps) = setup(micro_config());
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.value_mut(id).data_mut().fill(0.0);
        }
        let y = model.forecast(&ds, &ps, 3, 5).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert!(y.data().iter().all(|&v| v == 50.0));
    }

    #[test]
    fn forecasts_are_prefix_consistent_and_deterministic() {
        let (model, ds, ps) = setup(micro_config());
        let long = model.forecast(&ds, &ps, 5, 18).unwrap();
        let one = model.forecast(&ds, &ps, 5, 1).unwrap();
        for r in 0..3 {
            assert_eq!(one.get(r, 0), long.get(r, 0));
        }
        let short = model.forecast(&ds, &ps, 5, 7).unwrap();
        for r in 0..3 {
            assert_eq!(short.row(r), &long.row(r)[..7]);
        }
        let (again, _, _) = setup(micro_config());
        assert_eq!(again.forecast(&ds, &ps, 5, 18).unwrap(), long);
    }

    #[test]
    fn forecast_matches_once_per_node() {
        let (model, ds, ps) = setup(micro_config());
        let before = ps.query_count();
        model.forecast(&ds, &ps, 0, 6).unwrap();
        assert_eq!(ps.query_count() - before, 3);
    }

    #[test]
    fn layer_weights_sum_to_one() {
        let (model, ds, ps) = setup(micro_config());
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 4, &[0, 7, 20]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input, 4).unwrap();
        assert_eq!(out.alphas.len(), 4);
        for a in &out.alphas {
            assert_eq!(a.shape(), &[9, 2]);
            for r in 0..9 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batched_windows_match_single_windows() {
        let (model, ds, ps) = setup(micro_config());
        let both = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 4, &[2, 11]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &both, 3).unwrap();
        let joint = tape.value(out.pred).clone();
        for (b, s) in [2usize, 11].into_iter().enumerate() {
            let single = model.forecast(&ds, &ps, s, 3).unwrap();
            for r in 0..3 {
                for h in 0..3 {
                    let z = model.zscore.invert(joint.get(b * 3 + r, h));
                    assert!((z - single.get(r, h)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_input_matches_hand_evaluation() {
        let cfg = ModelConfig {
            t_in: 2,
            t_out: 1,
            d_h: 3,
            layers: 1,
            k: 1,
            num_patterns: 2,
            heads: 1,
            d_e: 1,
            seed: 3,
            simple_mem: true,
        };
        let mut model = ForecastModel::new(cfg, Tensor::eye(1), ZScore::new(0.0, 2.0).unwrap()).unwrap();
        let w_c = model.enc[0].w_c[0];
        model.store.value_mut(w_c).data_mut().fill(0.0);
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(1, 0, 0).unwrap();
        let ds = SeriesDataset::new(
            vec!["a".into()],
            vec![t0, t0 + Duration::minutes(5), t0 + Duration::minutes(10)],
            vec![vec![10.0, 14.0, 12.0]],
        )
        .unwrap();
        let ps = PatternSet::new(2, vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 1, 2, &[0]).unwrap();
        // zero-based window (−2, 2) minus pattern (−1, 1), divided by σ = 2
        assert_eq!(input.noise.row(0), &[-0.5, 0.5]);
        assert_eq!(input.last.get(0, 0), 7.0);

        let emb = model.store.value(model.emb).clone();
        let wn = model.store.value(model.w_noise).clone();
        let expected: Vec<f64> = (0..3)
            .map(|c| emb.get(12, c) + emb.get(13, c) - 0.5 * wn.get(0, c) + 0.5 * wn.get(1, c))
            .collect();
        let mut tape = Tape::new();
        let gather: GatherRows = vec![vec![(12, 1.0), (13, 1.0)]];
        let e = tape.param(&model.store, model.emb);
        let ht = tape.weighted_gather(e, gather).unwrap();
        let nz = tape.constant(input.noise.clone()).unwrap();
        let w = tape.param(&model.store, model.w_noise);
        let hn = tape.matmul(nz, w).unwrap();
        let h0 = tape.add(ht, hn).unwrap();
        for c in 0..3 {
            assert!((tape.value(h0).get(0, c) - expected[c]).abs() < 1e-14);
        }
        assert_eq!(ds.slots()[..2], [12, 13]);
    }

    /// Scalar evaluation of one decoder step with a single GRU-free layer
    /// stack: checks the energy, softmax, and mixture against the tape.
    #[test]
    fn decoder_step_matches_scalar_oracle() {
        let cfg = ModelConfig {
            t_in: 3,
            t_out: 1,
            d_h: 4,
            layers: 2,
            k: 2,
            num_patterns: 5,
            heads: 1,
            d_e: 2,
            seed: 11,
            simple_mem: false,
        };
        let mut model = ForecastModel::new(cfg.clone(), Tensor::eye(1), ZScore::new(40.0, 5.0).unwrap()).unwrap();
        // running stats with a non-trivial spread
        for b in &mut model.bn {
            b.mean = vec![0.05, -0.1, 0.2, 0.0];
            b.var = vec![1.2, 0.7, 2.0, 0.9];
        }
        let ds = dataset(1, 12, 4);
        let ps = patterns(3, 5, 9);
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 3, &[4]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input, 1).unwrap();
        let got = tape.value(out.pred).get(0, 0);

        // oracle, all scalar loops
        let s = &model.store;
        let d = 4;
        let val = |id: ParamId| s.value(id).clone();
        let vm = |v: &[f64], m: &Tensor| -> Vec<f64> {
            (0..m.cols()).map(|c| (0..v.len()).map(|r| v[r] * m.get(r, c)).sum()).collect()
        };
        let mw = input.matches[0].memory_weights();
        let mem: Vec<Vec<f64>> = model
            .bank
            .banks
            .iter()
            .map(|&b| {
                let t = s.value(b);
                (0..d).map(|c| mw.iter().map(|&(i, w)| w * t.get(i, c)).sum()).collect()
            })
            .collect();
        let layer = |h: &[f64], l: &GcMemLayer, bn: &BnStats, l_idx: usize| -> (Vec<f64>, Vec<f64>) {
            // N = 1: every support and attention is the scalar 1
            let w: Vec<f64> = (0..d * d)
                .map(|i| val(l.w_a[0]).data()[i] + val(l.w_adaptive[0]).data()[i] + val(l.w_c[0]).data()[i])
                .collect();
            let w = Tensor::new(vec![d, d], w).unwrap();
            let o: Vec<f64> = vm(&mem[l_idx + 1], &w).into_iter().map(|v| v.max(0.0)).collect();
            let (g, b) = (val(l.gamma), val(l.beta));
            let hn = (0..d)
                .map(|c| h[c] + g.data()[c] * (o[c] - bn.mean[c]) / (bn.var[c] + bn.eps).sqrt() + b.data()[c])
                .collect();
            (hn, o)
        };
        let slots: Vec<usize> = input.slots[0].clone();
        let emb = val(model.emb);
        let h0: Vec<f64> = {
            let nv = vm(input.noise.row(0), &val(model.w_noise));
            (0..d).map(|c| slots.iter().map(|&t| emb.get(t, c)).sum::<f64>() + nv[c]).collect()
        };
        let mut h = h0;
        for l in 0..2 {
            h = layer(&h, &model.enc[l], &model.bn[l], l).0;
        }
        // GRU, scalar
        let g = &model.gru;
        let x = input.last.get(0, 0);
        let gate = |wx: ParamId, wh: ParamId, b: ParamId, hh: &[f64]| -> Vec<f64> {
            let hw = vm(hh, &val(wh));
            (0..d).map(|c| x * val(wx).get(0, c) + hw[c] + val(b).data()[c]).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r: Vec<f64> = gate(g.w_xr, g.w_hr, g.b_r, &h).into_iter().map(sig).collect();
        let z: Vec<f64> = gate(g.w_xz, g.w_hz, g.b_z, &h).into_iter().map(sig).collect();
        let rh: Vec<f64> = (0..d).map(|c| r[c] * h[c]).collect();
        let nn: Vec<f64> = gate(g.w_xn, g.w_hn, g.b_n, &rh).into_iter().map(f64::tanh).collect();
        let state: Vec<f64> = (0..d).map(|c| (1.0 - z[c]) * nn[c] + z[c] * h[c]).collect();
        let mut hh = state;
        let mut energies = vec![];
        let mut projected = vec![];
        for l in 0..2 {
            let key = vm(&mem[l], &val(model.dec_score[l]));
            energies.push((0..d).map(|c| hh[c] * key[c]).sum::<f64>() / 2.0);
            let (hn, o) = layer(&hh, &model.dec[l], &model.bn[2 + l], l);
            projected.push(vm(&o, &val(model.w_proj))[0]);
            hh = hn;
        }
        let alpha = softmax(&energies).unwrap();
        let expected = alpha[0] * projected[0] + alpha[1] * projected[1];
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn single_layer_weight_is_one() {
        let mut cfg = micro_config();
        cfg.layers = 1;
        let (model, ds, ps) = setup(cfg);
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 4, &[1]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input, 3).unwrap();
        assert!(out.alphas.iter().all(|a| a.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn missing_input_is_rejected() {
        let (model, _, ps) = setup(micro_config());
        let mut ds = dataset(3, 40, 1);
        let t = ds.timestamps().to_vec();
        let mut speed: Vec<Vec<f64>> = (0..3).map(|n| ds.speed(n).to_vec()).collect();
        speed[1][6] = f64::NAN;
        ds = SeriesDataset::new(ds.node_ids().to_vec(), t, speed).unwrap();
        let err = model.forecast(&ds, &ps, 4, 2).unwrap_err();
        assert!(err.to_string().contains("missing"));
        assert!(model.forecast(&ds, &ps, 7, 2).is_ok());
    }

    #[test]
    fn pattern_bank_shape_is_checked() {
        let (model, ds, _) = setup(micro_config());
        assert!(model.forecast(&ds, &patterns(4, 5, 1), 0, 1).is_err());
        assert!(model.forecast(&ds, &patterns(3, 6, 1), 0, 1).is_err());
    }

    #[test]
    fn micro_end_to_end_gradients() {
        let (mut model, ds, ps) = setup(micro_config());
        let starts = [0, 9];
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 4, &starts).unwrap();
        let targets = Targets::from_dataset(&ds, &model.zscore, 4, 2, &starts).unwrap();
        // squared loss keeps the objective smooth for finite differences
        let report = grad_check(
            &mut model,
            |m, tape| {
                let out = m.forward(tape, &input, 2)?;
                let t = tape.constant(targets.values.clone())?;
                let diff = tape.sub(out.pred, t)?;
                let sq = tape.mul(diff, diff)?;
                tape.sum_all(sq)
            },
            1e-6,
            Coords::Sample { per_param: 6, seed: 1 },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:#?}");
        assert!(report.per_param.iter().all(|p| p.checked > 0));
        assert!(report.checked >= 200);
    }

    #[test]
    fn train_mode_updates_running_stats_only() {
        let (mut model, ds, ps) = setup(micro_config());
        let input = ModelInput::from_dataset(&ds, &model.zscore, &ps, 2, 4, &[0, 5]).unwrap();
        let before = model.bn.clone();
        let mut tape = Tape::new();
        model.forward(&mut tape, &input, 2).unwrap();
        assert_eq!(model.bn, before);
        let mut tape = Tape::new();
        model.forward_train(&mut tape, &input, 2).unwrap();
        assert_ne!(model.bn, before);
    }

    #[test]
    fn config_round_trips_through_pairs() {
        let mut cfg = micro_config();
        cfg.simple_mem = true;
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("epochs", "3").unwrap());
        assert!(back.set("d_h", "x").is_err());
    }
}
