#![allow(dead_code)]

use std::collections::HashMap;

use gujin::corpus::{AlignedPair, LabeledText};
use gujin::model::{CausalLm, ModelConfig, TokenBatch};
use gujin::numerics::Graph;
use gujin::vocab::PAD;
use gujin::{Gpt64, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2 layers, 2 heads, width 16.
pub fn tiny_config(vocab_size: usize, context_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 64,
        context_len,
        vocab_size,
        tie_embeddings: true,
    }
}

/// Parameter count from the shape list written out by hand.
pub fn closed_form_params(c: &ModelConfig) -> usize {
    let (v, d, f, t) = (c.vocab_size, c.d_model, c.d_ff, c.context_len);
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let mlp = d * f + f + f * d + d;
    let block = ln + attn + ln + mlp;
    let head = if c.tie_embeddings { 0 } else { v * d };
    v * d + t * d + c.n_layers * block + ln + head
}

/// Tiny model with embeddings redrawn at unit scale and every other tensor
/// jittered, so layer-norm inputs are O(1) and no weight sits at exactly 0 or 1.
pub fn random_model64(seed: u64, vocab_size: usize, context_len: usize) -> Gpt64 {
    let (emb, amp) = (1.0, 0.05);
    let mut m = Gpt64::init(tiny_config(vocab_size, context_len), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        for x in p.data_mut() {
            if i < 2 {
                *x = rng.random_range(-emb..=emb);
            } else {
                *x += rng.random_range(-amp..=amp);
            }
        }
    }
    m
}

pub fn random_rows(rng: &mut ChaCha8Rng, batch: usize, max_len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            (0..len).map(|_| rng.random_range(1..vocab)).collect()
        })
        .collect()
}

/// Mean next-token cross-entropy over all non-pad predictions.
pub fn lm_loss(model: &Gpt64, rows: &[Vec<usize>]) -> (Graph<f64>, gujin::numerics::Var) {
    let inputs: Vec<&[usize]> = rows.iter().map(|r| &r[..r.len() - 1]).collect();
    let batch = TokenBatch::from_rows(&inputs, None).unwrap();
    let mut targets = vec![PAD; batch.batch * batch.seq];
    let mut mask = vec![false; batch.batch * batch.seq];
    for (b, r) in rows.iter().enumerate() {
        for t in 0..r.len() - 1 {
            targets[b * batch.seq + t] = r[t + 1];
            mask[b * batch.seq + t] = true;
        }
    }
    let mut g = Graph::new();
    let logits = model.forward_graph(&mut g, &batch).unwrap();
    let loss = g.cross_entropy(logits, &targets, &mask).unwrap();
    (g, loss)
}

pub fn loss_value(model: &Gpt64, rows: &[Vec<usize>]) -> f64 {
    let (g, l) = lm_loss(model, rows);
    g.value(l)[0]
}

pub const GRAD_H: f64 = 1e-3;
/// Denominator floor for tensors whose true gradient is zero (key biases
/// shift every attention score in a row equally); far above the roundoff
/// of a central difference in f64, far below any live gradient norm.
pub const GRAD_NORM_FLOOR: f64 = 1e-8;

pub struct GradCheck {
    pub checked: usize,
    /// Largest `‖a - n‖ / max(‖a‖, ‖n‖, GRAD_NORM_FLOOR)` over parameter tensors.
    pub max_rel: f64,
    pub worst_tensor: String,
    /// Live element (magnitude above the floor) with the largest
    /// `|a - n| / max(|a|, |n|)`: (tensor, index, analytic, numeric).
    pub worst_element: (usize, usize, f64, f64),
    pub worst_element_rel: f64,
    pub model: Gpt64,
    pub rows: Vec<Vec<usize>>,
}

pub fn analytic_grads(model: &Gpt64, rows: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let (g, loss) = lm_loss(model, rows);
    let grads = g.backward(loss).unwrap();
    (0..model.params().len())
        .map(|i| {
            grads
                .param(i)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params()[i].len()])
        })
        .collect()
}

pub fn central_difference(model: &mut Gpt64, rows: &[Vec<usize>], i: usize, j: usize, h: f64) -> f64 {
    let orig = model.params()[i].data()[j];
    model.params_mut()[i].data_mut()[j] = orig + h;
    let up = loss_value(model, rows);
    model.params_mut()[i].data_mut()[j] = orig - h;
    let down = loss_value(model, rows);
    model.params_mut()[i].data_mut()[j] = orig;
    (up - down) / (2.0 * h)
}

/// Central differences for every element of every parameter.
pub fn grad_check(seed: u64) -> GradCheck {
    let vocab = 11;
    let mut model = random_model64(seed, vocab, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = random_rows(&mut rng, 2, 7, vocab);
    let analytic = analytic_grads(&model, &rows);
    let names = model.param_names();
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst_tensor: String::new(),
        worst_element: (0, 0, 0.0, 0.0),
        worst_element_rel: 0.0,
        model: model.clone(),
        rows: rows.clone(),
    };
    for (i, grad) in analytic.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (j, &a) in grad.iter().enumerate() {
            let n = central_difference(&mut model, &rows, i, j, GRAD_H);
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            let scale = a.abs().max(n.abs());
            let e = (a - n).abs() / scale;
            if scale > GRAD_NORM_FLOOR && e > out.worst_element_rel {
                out.worst_element_rel = e;
                out.worst_element = (i, j, a, n);
            }
            out.checked += 1;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(GRAD_NORM_FLOOR);
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst_tensor = names[i].clone();
        }
    }
    out
}

/// Perplexity by a plain per-sentence loop over single-row forwards,
/// log-softmax written out directly.
pub fn naive_perplexity<M: CausalLm>(model: &M, ids_per_text: &[Vec<usize>]) -> f64 {
    let v = model.vocab_size();
    let mut nll = 0.0;
    let mut n = 0usize;
    for ids in ids_per_text {
        for t in 1..ids.len() {
            // Input windows are consecutive blocks of context_len tokens.
            let start = (t - 1) / model.context_len() * model.context_len();
            let window = &ids[start..t];
            let logits = model.logits(window).unwrap();
            let row = &logits[(window.len() - 1) * v..window.len() * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            nll += -(row[ids[t]] - max - z.ln());
            n += 1;
        }
    }
    (nll / n as f64).exp()
}

/// BLEU counts by explicit enumeration: every candidate n-gram is compared
/// against a list of unused reference n-grams.
pub fn brute_bleu(cands: &[String], refs: &[String], max_n: usize) -> (Vec<u64>, Vec<u64>, Vec<f64>) {
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in cands.iter().zip(refs) {
        let cc: Vec<char> = cand.chars().collect();
        let rc: Vec<char> = reference.chars().collect();
        c += cc.len();
        r += rc.len();
        for n in 1..=max_n {
            let mut pool: Vec<Vec<char>> = if rc.len() >= n {
                (0..=rc.len() - n).map(|i| rc[i..i + n].to_vec()).collect()
            } else {
                Vec::new()
            };
            if cc.len() >= n {
                for i in 0..=cc.len() - n {
                    totals[n - 1] += 1;
                    if let Some(k) = pool.iter().position(|g| g[..] == cc[i..i + n]) {
                        pool.swap_remove(k);
                        matches[n - 1] += 1;
                    }
                }
            }
        }
    }
    let bp = if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let scores = (1..=max_n)
        .map(|k| {
            let ps: Vec<f64> = (0..k)
                .map(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 })
                .collect();
            if ps.contains(&0.0) {
                0.0
            } else {
                (bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / k as f64).exp()).min(1.0)
            }
        })
        .collect();
    (matches, totals, scores)
}

/// Per-label and weighted metrics from an explicit confusion matrix.
pub fn brute_weighted(truths: &[usize], preds: &[usize], k: usize) -> (f64, f64, f64, f64) {
    let mut cm = vec![vec![0usize; k]; k];
    for (&t, &p) in truths.iter().zip(preds) {
        cm[t][p] += 1;
    }
    let n = truths.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for l in 0..k {
        let tp = cm[l][l] as f64;
        let support: usize = cm[l].iter().sum();
        let predicted: usize = (0..k).map(|t| cm[t][l]).sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        wp += support as f64 * p;
        wr += support as f64 * r;
        wf += support as f64 * f;
    }
    let acc = (0..k).map(|l| cm[l][l]).sum::<usize>() as f64 / n;
    (wp / n, wr / n, wf / n, acc)
}

/// Sixteen short aligned pairs in the ancient/modern record layout.
pub fn toy_pairs() -> Vec<AlignedPair> {
    [
        ("學而時習之", "學習並且按時溫習它"),
        ("溫故而知新", "溫習舊知識從而得到新理解"),
        ("三人行必有我師", "幾個人同行其中必定有我的老師"),
        ("知之爲知之", "知道就是知道"),
        ("見賢思齊焉", "見到賢人就想向他看齊"),
        ("吾日三省吾身", "我每天多次反省自己"),
        ("己所不欲勿施於人", "自己不想要的不要強加給別人"),
        ("君子不器", "君子不像器具那樣只有一種用途"),
        ("朝聞道夕死可矣", "早晨得知真理當晚死去也可以"),
        ("後生可畏", "年輕人值得敬畏"),
        ("歲寒知松柏", "天冷才知道松柏不凋"),
        ("言必信行必果", "說話一定守信做事一定果斷"),
        ("德不孤必有鄰", "有道德的人不會孤單"),
        ("過而不改是謂過矣", "有錯不改才是真正的錯"),
        ("敏而好學", "聰明而且愛好學習"),
        ("不恥下問", "不以向地位低的人請教爲恥"),
    ]
    .iter()
    .map(|(a, m)| AlignedPair::new(*a, *m).unwrap())
    .collect()
}

pub const MARKER_LABELS: [&str; 2] = ["儒家", "道家"];
const FILLER: &str = "天地玄黃宇宙洪荒日月盈昃辰宿列張寒來暑往秋收冬藏";
const MARKERS: [char; 2] = ['仁', '道'];

/// Filler text with exactly one marker character whose identity fixes the label.
pub fn marker_dataset(n: usize, seed: u64) -> Vec<LabeledText> {
    let filler: Vec<char> = FILLER.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2);
            let len = rng.random_range(4..10);
            let mut text: Vec<char> = (0..len).map(|_| filler[rng.random_range(0..filler.len())]).collect();
            text.insert(rng.random_range(0..=len), MARKERS[label]);
            LabeledText::new(text.into_iter().collect::<String>(), MARKER_LABELS[label]).unwrap()
        })
        .collect()
}

/// `n` distinct CJK characters starting at `offset`.
pub fn distinct_chars(offset: u32, n: usize) -> Vec<char> {
    (0..n as u32).map(|i| char::from_u32(0x4e00 + offset + i).unwrap()).collect()
}

/// Two texts whose bigram Dice similarity is exactly `shared * 2 / (2 * bigrams)`:
/// both have `bigrams` bigrams, the last `bigrams - shared` of which differ.
pub fn dice_pair(bigrams: usize, shared: usize) -> (String, String) {
    let a = distinct_chars(0, bigrams + 1);
    let mut b = a.clone();
    let fresh = distinct_chars(1000, bigrams - shared);
    let n = b.len();
    for (k, c) in fresh.into_iter().enumerate() {
        b[n - (bigrams - shared) + k] = c;
    }
    (a.into_iter().collect(), b.into_iter().collect())
}

pub fn bigram_multiset(s: &str) -> HashMap<(char, char), usize> {
    let c: Vec<char> = s.chars().collect();
    let mut m = HashMap::new();
    for w in c.windows(2) {
        *m.entry((w[0], w[1])).or_insert(0) += 1;
    }
    m
}

pub fn as_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}
