//! Decode-time cache for one temporal-mixing block.
//!
//! Per head the cache keeps the gated, rotated entries a future query can
//! read: sink positions, completed block summaries, and a ring of recent
//! positions (the local band, or everything when a top-k section is
//! present). The self term always comes from the running recurrence state, so
//! no other token needs storage. Positions that qualify for several stores
//! are held once, in the first of summary, sink, ring.
//!
//! A finite recurrence window is served exactly by keeping the last `L` raw
//! `(k, v, g)` rows and rescanning them each step.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_online, attention_scale, segments_of, temporal_mixing_forward_with, ForwardOptions, MixingParams, Segment,
};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{matmul, sigmoid, Array, RopeParams};
use crate::patterns::{attended_set, dilated_indices, SparsePatternSpec};
use crate::recurrence::{RecurrenceState, RecurrenceWindow};

/// Bytes per stored scalar.
pub const STORAGE_BYTES: usize = std::mem::size_of::<f64>();

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RKVC";

/// One stored `(k̃, ṽ)` pair; `k` is already rotated to its position.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub pos: usize,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadCache {
    pub sink_entries: Vec<Entry>,
    /// `block_summaries[i]` sits at position `(i+1)·D − 1`.
    pub block_summaries: Vec<Entry>,
    pub local_ring: VecDeque<Entry>,
}

impl HeadCache {
    pub fn stored(&self) -> usize {
        self.sink_entries.len() + self.block_summaries.len() + self.local_ring.len()
    }

    fn lookup(&self, pos: usize, spec: &SparsePatternSpec) -> Option<&Entry> {
        let d = spec.dilation.max(1);
        if (pos + 1).is_multiple_of(d) {
            return self.block_summaries.get((pos + 1) / d - 1).filter(|e| e.pos == pos);
        }
        if pos < spec.sinks {
            return self.sink_entries.iter().find(|e| e.pos == pos);
        }
        let (a, b) = self.local_ring.as_slices();
        let idx = |s: &[Entry]| s.binary_search_by_key(&pos, |e| e.pos).ok();
        idx(a).map(|i| &a[i]).or_else(|| idx(b).map(|i| &b[i]))
    }

    fn absorb(&mut self, e: Entry, spec: &SparsePatternSpec) {
        let d = spec.dilation.max(1);
        let t = e.pos;
        if (t + 1).is_multiple_of(d) {
            self.block_summaries.push(e);
        } else if t < spec.sinks {
            self.sink_entries.push(e);
        } else if spec.topk.is_some() || spec.window > 0 {
            self.local_ring.push_back(e);
        }
        if spec.topk.is_none() {
            // the next query (t+1) reads [t+1-W, t+1)
            let keep_from = (t + 1).saturating_sub(spec.window);
            while self.local_ring.front().is_some_and(|f| f.pos < keep_from) {
                self.local_ring.pop_front();
            }
        }
    }
}

/// Raw projections of one token, kept only for finite recurrence windows.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    /// Entries per head, counting the recurrence-state slot.
    pub entries: usize,
    /// Total bytes over all heads, including state and raw rows.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DilatedKVCache {
    pub specs: Vec<SparsePatternSpec>,
    pub rope: RopeParams,
    pub options: ForwardOptions,
    pub heads: usize,
    pub head_dim: usize,
    pub head_caches: Vec<HeadCache>,
    pub rec_state: RecurrenceState,
    pub raw_ring: VecDeque<RawRow>,
    /// Last decoded position.
    pub t: Option<usize>,
}

fn longest_finite_window(specs: &[SparsePatternSpec]) -> usize {
    specs
        .iter()
        .filter_map(|s| match s.recurrence_window {
            RecurrenceWindow::Finite(l) => Some(l),
            RecurrenceWindow::Full => None,
        })
        .max()
        .unwrap_or(0)
}

impl DilatedKVCache {
    pub fn new(specs: Vec<SparsePatternSpec>, heads: usize, head_dim: usize, rope: RopeParams) -> Result<Self> {
        Self::with_options(specs, heads, head_dim, rope, ForwardOptions::default())
    }

    pub fn with_options(
        specs: Vec<SparsePatternSpec>,
        heads: usize,
        head_dim: usize,
        rope: RopeParams,
        options: ForwardOptions,
    ) -> Result<Self> {
        if specs.len() != heads {
            return Err(Error::SpecMismatch(format!("{} specs for {heads} heads", specs.len())));
        }
        specs.iter().try_for_each(SparsePatternSpec::validate)?;
        Ok(DilatedKVCache {
            specs,
            rope,
            options,
            heads,
            head_dim,
            head_caches: vec![HeadCache::default(); heads],
            rec_state: RecurrenceState::zeros(heads, head_dim),
            raw_ring: VecDeque::new(),
            t: None,
        })
    }

    pub fn next_position(&self) -> usize {
        self.t.map_or(0, |t| t + 1)
    }

    fn check_params(&self, params: &MixingParams) -> Result<()> {
        params.validate()?;
        if params.heads != self.heads || params.head_dim != self.head_dim {
            return Err(Error::shape(
                "kv_cache",
                format!(
                    "cache has {}×{} heads, params {}×{}",
                    self.heads, self.head_dim, params.heads, params.head_dim
                ),
            ));
        }
        Ok(())
    }

    fn push_raw(&mut self, row: RawRow) {
        let keep = longest_finite_window(&self.specs);
        if keep == 0 {
            return;
        }
        self.raw_ring.push_back(row);
        while self.raw_ring.len() > keep {
            self.raw_ring.pop_front();
        }
    }
}

/// Runs the block over `x` and returns its outputs plus a cache ready to
/// continue at position `T`.
pub fn prefill(
    x: &Array,
    params: &MixingParams,
    specs: &[SparsePatternSpec],
    rope: &RopeParams,
    options: ForwardOptions,
) -> Result<(Array, DilatedKVCache)> {
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(Error::Empty { op: "prefill" });
    }
    let mut cache = DilatedKVCache::with_options(specs.to_vec(), params.heads, params.head_dim, *rope, options)?;
    cache.check_params(params)?;
    let (y, rec) = temporal_mixing_forward_with(x, params, specs, rope, options)?;
    let (t_len, hd) = (x.rows(), params.head_dim);
    for t in 0..t_len {
        for (h, spec) in specs.iter().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            let e = Entry { pos: t, k: rec.k_rot.row(t)[cols.clone()].to_vec(), v: rec.v_tilde.row(t)[cols].to_vec() };
            cache.head_caches[h].absorb(e, spec);
        }
    }
    let keep = longest_finite_window(specs);
    for t in t_len.saturating_sub(keep)..t_len {
        cache.push_raw(RawRow { k: rec.k.row(t).to_vec(), v: rec.v.row(t).to_vec(), g: rec.g.row(t).to_vec() });
    }
    for (h, spec) in specs.iter().enumerate() {
        if spec.recurrence_window == RecurrenceWindow::Full {
            let cols = h * hd..(h + 1) * hd;
            cache.rec_state.k_state.row_mut(h).copy_from_slice(&rec.k_tilde.row(t_len - 1)[cols.clone()]);
            cache.rec_state.v_state.row_mut(h).copy_from_slice(&rec.v_tilde.row(t_len - 1)[cols]);
        }
    }
    cache.rec_state.step = Some(t_len - 1);
    cache.t = Some(t_len - 1);
    Ok((y, cache))
}

fn project_row(x: &Array, w: &Array) -> Result<Vec<f64>> {
    Ok(matmul(x, w)?.into_data())
}

/// Processes the token at position `t` (must be `cache.t + 1`) and returns
/// its block output.
pub fn decode_step(cache: &mut DilatedKVCache, t: usize, x_t: &[f64], params: &MixingParams) -> Result<Vec<f64>> {
    let expected = cache.next_position();
    if t != expected {
        return Err(Error::OutOfOrder { expected, got: t });
    }
    cache.check_params(params)?;
    if x_t.len() != params.model_dim() {
        return Err(Error::shape("decode_step", format!("x has {} features, want {}", x_t.len(), params.model_dim())));
    }
    let (hd, gd) = (cache.head_dim, params.gate_dim());
    let x = Array::new(&[1, x_t.len()], x_t.to_vec())?;
    let q = project_row(&x, &params.w_q)?;
    let k = project_row(&x, &params.w_k)?;
    let v = project_row(&x, &params.w_v)?;
    let g = match cache.options.recurrence_gate {
        Some(c) => vec![c; gd],
        None => project_row(&x, &params.gate.w_gate)?.into_iter().map(sigmoid).collect(),
    };
    cache.push_raw(RawRow { k: k.clone(), v: v.clone(), g: g.clone() });

    let scale = attention_scale(hd);
    let mut attn = vec![0.0; gd];
    for h in 0..cache.heads {
        let cols = h * hd..(h + 1) * hd;
        let spec = cache.specs[h];
        let (k_tilde, v_tilde) = match spec.recurrence_window {
            RecurrenceWindow::Full => {
                let ks = cache.rec_state.k_state.row_mut(h);
                for (c, s) in cols.clone().zip(ks.iter_mut()) {
                    *s = g[c] * *s + (1.0 - g[c]) * k[c];
                }
                let vs = cache.rec_state.v_state.row_mut(h);
                for (c, s) in cols.clone().zip(vs.iter_mut()) {
                    *s = g[c] * *s + (1.0 - g[c]) * v[c];
                }
                (cache.rec_state.k_state.row(h).to_vec(), cache.rec_state.v_state.row(h).to_vec())
            }
            RecurrenceWindow::Finite(l) => {
                let (mut ks, mut vs) = (vec![0.0; hd], vec![0.0; hd]);
                let skip = cache.raw_ring.len().saturating_sub(l);
                for row in cache.raw_ring.iter().skip(skip) {
                    for (i, c) in cols.clone().enumerate() {
                        ks[i] = row.g[c] * ks[i] + (1.0 - row.g[c]) * row.k[c];
                    }
                    for (i, c) in cols.clone().enumerate() {
                        vs[i] = row.g[c] * vs[i] + (1.0 - row.g[c]) * row.v[c];
                    }
                }
                (ks, vs)
            }
        };
        let mut q_rot = q[cols.clone()].to_vec();
        let mut k_rot = k_tilde;
        cache.rope.rotate(&mut q_rot, t, false);
        cache.rope.rotate(&mut k_rot, t, false);

        let store = &cache.head_caches[h];
        let fetch = |p: usize| -> Result<(&[f64], &[f64])> {
            if p == t {
                return Ok((&k_rot, &v_tilde));
            }
            store
                .lookup(p, &spec)
                .map(|e| (e.k.as_slice(), e.v.as_slice()))
                .ok_or_else(|| Error::MissingRecord(format!("cache entry for position {p}, head {h}")))
        };
        let set = if spec.topk.is_some() {
            let mut keys = Array::zeros(&[t + 1, hd]);
            for p in 0..=t {
                keys.row_mut(p).copy_from_slice(fetch(p)?.0);
            }
            attended_set(t, &spec, &q_rot, &keys)?
        } else {
            dilated_indices(t, &spec)
        };
        let mut kc = Array::zeros(&[set.len(), hd]);
        let mut vc = Array::zeros(&[set.len(), hd]);
        for (i, &(p, _)) in set.entries.iter().enumerate() {
            let (kr, vr) = fetch(p)?;
            kc.row_mut(i).copy_from_slice(kr);
            vc.row_mut(i).copy_from_slice(vr);
        }
        let segments: Vec<Segment> = segments_of(&set)
            .into_iter()
            .map(|s| Segment {
                slot: s.slot,
                positions: s
                    .positions
                    .iter()
                    .map(|p| set.entries.binary_search_by_key(p, |e| e.0).expect("position from the same set"))
                    .collect(),
            })
            .collect();
        let out = attend_online(&q_rot, &kc, &vc, &segments, scale)?;
        attn[cols].copy_from_slice(&out);
        cache.head_caches[h].absorb(Entry { pos: t, k: k_rot, v: v_tilde }, &spec);
    }
    cache.rec_state.step = Some(t);
    cache.t = Some(t);

    let og: Vec<f64> = match cache.options.output_gate {
        Some(c) => vec![c; gd],
        None => project_row(&x, &params.output.w_og)?.into_iter().map(sigmoid).collect(),
    };
    let gated: Vec<f64> = attn.iter().zip(&og).map(|(a, o)| a * o).collect();
    let y = project_row(&Array::new(&[1, gd], gated)?, &params.output.w_out)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "decode_step" });
    }
    Ok(y)
}

/// Entry count (per head, state slot included) and exact storage bytes.
pub fn cache_footprint(cache: &DilatedKVCache) -> Footprint {
    let hd = cache.head_dim;
    let per_head = cache.head_caches.iter().map(HeadCache::stored).max().unwrap_or(0);
    let stored: usize = cache.head_caches.iter().map(HeadCache::stored).sum();
    let state = cache.heads * 2 * hd;
    let raw = cache.raw_ring.len() * 3 * cache.heads * hd;
    Footprint { entries: per_head + 1, bytes: (stored * 2 * hd + state + raw) * STORAGE_BYTES }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotMeta {
    specs: Vec<SparsePatternSpec>,
    rope: RopeParams,
    options: ForwardOptions,
    heads: usize,
    head_dim: usize,
    t: Option<usize>,
    /// Per head: sink, summary and ring positions.
    positions: Vec<[Vec<usize>; 3]>,
    raw_rows: usize,
}

fn entries_array(entries: &[&Entry], hd: usize, value: bool) -> Result<Array> {
    let data = entries.iter().flat_map(|e| if value { e.v.clone() } else { e.k.clone() }).collect();
    Array::new(&[entries.len(), hd], data)
}

fn entries_from(pos: &[usize], k: &Array, v: &Array) -> Result<Vec<Entry>> {
    if k.rows() != pos.len() || v.rows() != pos.len() {
        return Err(Error::Format("entry count disagrees with positions".into()));
    }
    Ok(pos.iter().enumerate().map(|(i, &p)| Entry { pos: p, k: k.row(i).to_vec(), v: v.row(i).to_vec() }).collect())
}

impl DilatedKVCache {
    /// Writes a resumable snapshot. Values are stored as 32-bit floats.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        let hd = self.head_dim;
        let meta = SnapshotMeta {
            specs: self.specs.clone(),
            rope: self.rope,
            options: self.options,
            heads: self.heads,
            head_dim: hd,
            t: self.t,
            positions: self
                .head_caches
                .iter()
                .map(|c| {
                    [
                        c.sink_entries.iter().map(|e| e.pos).collect(),
                        c.block_summaries.iter().map(|e| e.pos).collect(),
                        c.local_ring.iter().map(|e| e.pos).collect(),
                    ]
                })
                .collect(),
            raw_rows: self.raw_ring.len(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Container::new(json);
        for (h, hc) in self.head_caches.iter().enumerate() {
            let groups: [(&str, Vec<&Entry>); 3] = [
                ("sink", hc.sink_entries.iter().collect()),
                ("summary", hc.block_summaries.iter().collect()),
                ("ring", hc.local_ring.iter().collect()),
            ];
            for (name, es) in groups {
                c.push(format!("head{h}.{name}.k"), entries_array(&es, hd, false)?);
                c.push(format!("head{h}.{name}.v"), entries_array(&es, hd, true)?);
            }
        }
        c.push("state.k", self.rec_state.k_state.clone());
        c.push("state.v", self.rec_state.v_state.clone());
        let gd = self.heads * hd;
        for (name, pick) in [("raw.k", 0), ("raw.v", 1), ("raw.g", 2)] {
            let data = self
                .raw_ring
                .iter()
                .flat_map(|r| [&r.k, &r.v, &r.g][pick].iter().copied())
                .collect();
            c.push(name, Array::new(&[self.raw_ring.len(), gd], data)?);
        }
        c.write_to(w, SNAPSHOT_MAGIC)
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let c = Container::read_from(r, SNAPSHOT_MAGIC)?;
        let meta: SnapshotMeta = serde_json::from_str(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
        if meta.positions.len() != meta.heads {
            return Err(Error::Format("per-head positions missing".into()));
        }
        let mut cache = DilatedKVCache::with_options(meta.specs, meta.heads, meta.head_dim, meta.rope, meta.options)?;
        for (h, [sinks, summaries, ring]) in meta.positions.iter().enumerate() {
            let load = |name: &str, pos: &[usize]| -> Result<Vec<Entry>> {
                entries_from(pos, c.get(&format!("head{h}.{name}.k"))?, c.get(&format!("head{h}.{name}.v"))?)
            };
            let hc = &mut cache.head_caches[h];
            hc.sink_entries = load("sink", sinks)?;
            hc.block_summaries = load("summary", summaries)?;
            hc.local_ring = load("ring", ring)?.into();
        }
        let state_shape = [meta.heads, meta.head_dim];
        let (ks, vs) = (c.get("state.k")?, c.get("state.v")?);
        if ks.shape() != state_shape || vs.shape() != state_shape {
            return Err(Error::Format("recurrence state shape".into()));
        }
        cache.rec_state = RecurrenceState { k_state: ks.clone(), v_state: vs.clone(), step: meta.t };
        let (rk, rv, rg) = (c.get("raw.k")?, c.get("raw.v")?, c.get("raw.g")?);
        let gd = meta.heads * meta.head_dim;
        for a in [rk, rv, rg] {
            if a.shape() != [meta.raw_rows, gd] {
                return Err(Error::Format("raw row shape".into()));
            }
        }
        cache.raw_ring = (0..meta.raw_rows)
            .map(|i| RawRow { k: rk.row(i).to_vec(), v: rv.row(i).to_vec(), g: rg.row(i).to_vec() })
            .collect();
        cache.t = meta.t;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::patterns::{expected_cache_entries, BlockScoring, TopKSpec};

    fn block(seed: u64, d: usize, heads: usize, hd: usize) -> MixingParams {
        MixingParams::init(d, heads, hd, 0.3, &mut Rng::new(seed))
    }

    fn decode_all(x: &Array, params: &MixingParams, specs: &[SparsePatternSpec]) -> (Array, DilatedKVCache) {
        let rope = RopeParams::new(params.head_dim);
        let mut cache = DilatedKVCache::new(specs.to_vec(), params.heads, params.head_dim, rope).unwrap();
        let mut y = Array::zeros(&[x.rows(), x.cols()]);
        for t in 0..x.rows() {
            let out = decode_step(&mut cache, t, x.row(t), params).unwrap();
            y.row_mut(t).copy_from_slice(&out);
        }
        (y, cache)
    }

    fn assert_caches_close(a: &DilatedKVCache, b: &DilatedKVCache, tol: f64) {
        assert_eq!(a.t, b.t);
        for (x, y) in a.head_caches.iter().zip(&b.head_caches) {
            let pairs = [
                (x.sink_entries.iter().collect::<Vec<_>>(), y.sink_entries.iter().collect::<Vec<_>>()),
                (x.block_summaries.iter().collect(), y.block_summaries.iter().collect()),
                (x.local_ring.iter().collect(), y.local_ring.iter().collect()),
            ];
            for (ea, eb) in pairs {
                assert_eq!(ea.len(), eb.len());
                for (p, q) in ea.iter().zip(&eb) {
                    assert_eq!(p.pos, q.pos);
                    for (u, v) in p.k.iter().chain(&p.v).zip(q.k.iter().chain(&q.v)) {
                        assert!((u - v).abs() <= tol);
                    }
                }
            }
        }
        assert!(a.rec_state.k_state.max_abs_diff(&b.rec_state.k_state) <= tol);
        assert!(a.rec_state.v_state.max_abs_diff(&b.rec_state.v_state) <= tol);
        assert_eq!(a.raw_ring.len(), b.raw_ring.len());
    }

    #[test]
    fn decode_matches_prefill_across_patterns() {
        let (d, heads, hd, t_len) = (8, 2, 4, 96);
        let params = block(1, d, heads, hd);
        let x = Array::randn(&[t_len, d], 1.0, &mut Rng::new(2));
        let rope = RopeParams::new(hd);
        let topk = TopKSpec { block_size: 8, k: 3, scoring: BlockScoring::Quest };
        let cases = vec![
            SparsePatternSpec::dense(),
            SparsePatternSpec::dilated(8),
            SparsePatternSpec::dilated(4).with_window(5),
            SparsePatternSpec::dilated(3).with_sinks(2),
            SparsePatternSpec::dense().with_topk(topk, false),
            SparsePatternSpec::dilated(8).with_topk(topk, true),
            SparsePatternSpec::dilated(4).with_recurrence(RecurrenceWindow::Finite(6)),
        ];
        for spec in cases {
            let specs = vec![spec, SparsePatternSpec::dilated(2)];
            let (want, pre) = prefill(&x, &params, &specs, &rope, ForwardOptions::default()).unwrap();
            let (got, dec) = decode_all(&x, &params, &specs);
            assert!(got.max_abs_diff(&want) <= 1e-10, "{}: {}", spec.label(), got.max_abs_diff(&want));
            assert_caches_close(&pre, &dec, 1e-12);
        }
    }

    #[test]
    fn entry_count_tracks_expected_every_step() {
        let (d, heads, hd) = (6, 1, 2);
        let params = block(3, d, heads, hd);
        let x = Array::randn(&[70, d], 1.0, &mut Rng::new(4));
        let rope = RopeParams::new(hd);
        for spec in [
            SparsePatternSpec::dense(),
            SparsePatternSpec::dilated(4),
            SparsePatternSpec::dilated(2).with_window(3),
            SparsePatternSpec::dilated(16).with_window(5).with_sinks(4),
            SparsePatternSpec::dilated(3).with_sinks(7),
        ] {
            let mut cache = DilatedKVCache::new(vec![spec], heads, hd, rope).unwrap();
            assert_eq!(cache_footprint(&cache).entries, 1);
            for t in 0..70 {
                decode_step(&mut cache, t, x.row(t), &params).unwrap();
                assert_eq!(cache_footprint(&cache).entries, expected_cache_entries(t + 1, &spec), "{}", spec.label());
            }
        }
    }

    #[test]
    fn dense_cache_grows_one_per_step() {
        let params = block(5, 4, 1, 2);
        let x = Array::randn(&[20, 4], 1.0, &mut Rng::new(5));
        let mut cache = DilatedKVCache::new(vec![SparsePatternSpec::dense()], 1, 2, RopeParams::new(2)).unwrap();
        let mut prev = cache_footprint(&cache).entries;
        for t in 0..20 {
            decode_step(&mut cache, t, x.row(t), &params).unwrap();
            let now = cache_footprint(&cache).entries;
            assert_eq!(now, prev + 1);
            prev = now;
        }
    }

    #[test]
    fn footprint_law_and_summary_timing() {
        let d = 8;
        let spec = SparsePatternSpec::dilated(d);
        let params = block(6, 4, 1, 2);
        let x = Array::randn(&[64, 4], 1.0, &mut Rng::new(6));
        let mut cache = DilatedKVCache::new(vec![spec], 1, 2, RopeParams::new(2)).unwrap();
        let mut prev = cache_footprint(&cache).entries;
        for t in 0..64 {
            let before = cache.head_caches[0].block_summaries.len();
            decode_step(&mut cache, t, x.row(t), &params).unwrap();
            let now = cache_footprint(&cache).entries;
            if t >= spec.sinks {
                assert!(now - prev <= 1);
            }
            let appended = cache.head_caches[0].block_summaries.len() - before;
            assert_eq!(appended == 1, t % d == d - 1);
            prev = now;
        }
    }

    #[test]
    fn prefill_small_cases() {
        let (d, hd) = (4, 2);
        let params = block(7, d, 1, hd);
        let rope = RopeParams::new(hd);
        let x = Array::randn(&[8, d], 1.0, &mut Rng::new(7));
        let spec = SparsePatternSpec::dilated(8).with_sinks(3);
        let (_, c) = prefill(&x, &params, &[spec], &rope, ForwardOptions::default()).unwrap();
        let hc = &c.head_caches[0];
        assert_eq!(hc.sink_entries.len(), 3);
        assert_eq!(hc.block_summaries.len(), 1);
        assert_eq!(hc.block_summaries[0].pos, 7);

        let short = Array::randn(&[2, d], 1.0, &mut Rng::new(8));
        let spec = SparsePatternSpec::dilated(16);
        let (_, c) = prefill(&short, &params, &[spec], &rope, ForwardOptions::default()).unwrap();
        assert_eq!(c.head_caches[0].sink_entries.iter().map(|e| e.pos).collect::<Vec<_>>(), vec![0, 1]);
        assert!(prefill(&Array::zeros(&[0, d]), &params, &[SparsePatternSpec::dense()], &rope, ForwardOptions::default()).is_err());
    }

    #[test]
    fn prefill_equals_stepping_and_split() {
        let (d, heads, hd) = (8, 2, 4);
        let params = block(9, d, heads, hd);
        let rope = RopeParams::new(hd);
        let x = Array::randn(&[40, d], 1.0, &mut Rng::new(9));
        let specs = vec![SparsePatternSpec::dilated(8), SparsePatternSpec::dilated(8).with_window(3)];
        let (_, pre) = prefill(&x, &params, &specs, &rope, ForwardOptions::default()).unwrap();
        let (ys, stepped) = decode_all(&x, &params, &specs);
        assert_caches_close(&pre, &stepped, 1e-12);

        let head = Array::new(&[17, d], x.data()[..17 * d].to_vec()).unwrap();
        let (_, mut split) = prefill(&head, &params, &specs, &rope, ForwardOptions::default()).unwrap();
        for t in 17..40 {
            let y = decode_step(&mut split, t, x.row(t), &params).unwrap();
            for (a, b) in y.iter().zip(ys.row(t)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_caches_close(&split, &stepped, 1e-12);
    }

    #[test]
    fn summaries_equal_full_scan_values() {
        let (d, hd) = (4, 2);
        let params = block(10, d, 1, hd);
        let rope = RopeParams::nope(hd);
        let x = Array::randn(&[33, d], 1.0, &mut Rng::new(10));
        let spec = SparsePatternSpec::dilated(4);
        let (_, rec) = crate::attention::temporal_mixing_forward(&x, &params, &[spec], &rope).unwrap();
        let mut cache = DilatedKVCache::new(vec![spec], 1, hd, rope).unwrap();
        for t in 0..33 {
            decode_step(&mut cache, t, x.row(t), &params).unwrap();
        }
        for (i, e) in cache.head_caches[0].block_summaries.iter().enumerate() {
            let p = (i + 1) * 4 - 1;
            assert_eq!(e.pos, p);
            for (a, b) in e.k.iter().zip(rec.k_tilde.row(p)) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn window_adds_band_minus_overlap() {
        let (d, hd) = (4, 2);
        let params = block(11, d, 1, hd);
        let rope = RopeParams::new(hd);
        let x = Array::randn(&[300, d], 1.0, &mut Rng::new(11));
        let base = SparsePatternSpec::dilated(16);
        let wide = base.with_window(40);
        let mut a = DilatedKVCache::new(vec![base], 1, hd, rope).unwrap();
        let mut b = DilatedKVCache::new(vec![wide], 1, hd, rope).unwrap();
        for t in 0..300 {
            decode_step(&mut a, t, x.row(t), &params).unwrap();
            decode_step(&mut b, t, x.row(t), &params).unwrap();
            let n = t + 1;
            let lo = n.saturating_sub(40);
            // band positions already held as sinks or summaries
            let shared = (lo..n).filter(|&p| p < base.sinks || (p + 1) % 16 == 0).count();
            let diff = cache_footprint(&b).entries - cache_footprint(&a).entries;
            assert_eq!(diff, (n - lo) - shared);
        }
    }

    #[test]
    fn rejects_out_of_order_and_bad_shapes() {
        let params = block(12, 4, 1, 2);
        let mut cache = DilatedKVCache::new(vec![SparsePatternSpec::dense()], 1, 2, RopeParams::new(2)).unwrap();
        assert!(matches!(
            decode_step(&mut cache, 1, &[0.0; 4], &params),
            Err(Error::OutOfOrder { expected: 0, got: 1 })
        ));
        assert!(decode_step(&mut cache, 0, &[0.0; 3], &params).is_err());
        decode_step(&mut cache, 0, &[0.1; 4], &params).unwrap();
        assert!(matches!(decode_step(&mut cache, 0, &[0.1; 4], &params), Err(Error::OutOfOrder { .. })));
        let wide = block(12, 4, 2, 2);
        assert!(decode_step(&mut cache, 1, &[0.1; 4], &wide).is_err());
    }

    #[test]
    fn footprint_bytes() {
        let cache = DilatedKVCache::new(vec![SparsePatternSpec::dilated(4); 2], 2, 8, RopeParams::new(8)).unwrap();
        assert_eq!(cache_footprint(&cache), Footprint { entries: 1, bytes: 2 * 2 * 8 * STORAGE_BYTES });
    }

    #[test]
    fn snapshot_resume() {
        let (d, heads, hd) = (8, 2, 4);
        let params = block(13, d, heads, hd);
        let rope = RopeParams::new(hd);
        let x = Array::randn(&[50, d], 1.0, &mut Rng::new(13));
        let specs = vec![
            SparsePatternSpec::dilated(4).with_window(3),
            SparsePatternSpec::dilated(2).with_recurrence(RecurrenceWindow::Finite(5)),
        ];
        let head = Array::new(&[30, d], x.data()[..30 * d].to_vec()).unwrap();
        let (_, cache) = prefill(&head, &params, &specs, &rope, ForwardOptions::default()).unwrap();
        let mut buf = Vec::new();
        cache.write_snapshot(&mut buf).unwrap();
        let mut restored = DilatedKVCache::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_caches_close(&cache, &restored, 1e-6);
        assert_eq!(cache_footprint(&cache), cache_footprint(&restored));
        let mut live = cache;
        for t in 30..50 {
            let a = decode_step(&mut live, t, x.row(t), &params).unwrap();
            let b = decode_step(&mut restored, t, x.row(t), &params).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-5);
            }
        }
        buf[0] = b'X';
        assert!(matches!(DilatedKVCache::read_snapshot(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
