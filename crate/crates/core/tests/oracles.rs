//! Library outputs against straight-line reimplementations on plain vectors.

use mtdnn::encoder::{encode, lexicon_encode, pack, EncoderParams, SpecialIds};
use mtdnn::heads::{classify_single, relevance, san_forward, similarity, HeadParams};
use mtdnn::objectives::{cross_entropy, mse, ranking_nll};
use mtdnn::rng::{stream, Purpose};
use mtdnn::{Graph, ModelConfig, ParamStore, Tensor};
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn vec_mat(v: &[f64], b: &Mat) -> Vec<f64> {
    mm(&vec![v.to_vec()], b).remove(0)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

fn matrix(t: &Tensor) -> Mat {
    match t.shape() {
        [_, c] => t.data().chunks(*c).map(<[f64]>::to_vec).collect(),
        [n] => t.data().iter().map(|&v| vec![v]).take(*n).collect(),
        s => panic!("not a matrix: {s:?}"),
    }
}

/// Fixed, structured but non-degenerate values for every parameter.
fn fill_fixed(store: &mut ParamStore) {
    for (k, p) in store.iter_mut().enumerate() {
        let gain = p.name.ends_with("norm.gain");
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            let wave = (0.37 * (7 * k + 3 * j + 1) as f64).sin();
            *v = if gain { 1.0 + 0.1 * wave } else { 0.3 * wave };
        }
    }
}

fn get(store: &ParamStore, name: &str) -> Tensor {
    store.value(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = stream(1, Purpose::Init);
    let a: Mat = (0..3).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let b: Mat = (0..5).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut g = Graph::new();
    let va = g.constant(Tensor::from_rows(&a).unwrap()).unwrap();
    let vb = g.constant(Tensor::from_rows(&b).unwrap()).unwrap();
    let c = g.matmul(va, vb).unwrap();
    assert_close(g.value(c).data(), &mm(&a, &b).concat(), 1e-12);
}

#[test]
fn lexicon_is_per_row_sum() {
    let config = ModelConfig {
        max_len: 8,
        ..ModelConfig::new(4, 0, 1, 12)
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, &config, &mut stream(2, Purpose::Init)).unwrap();
    let special = SpecialIds { cls: 2, sep: 3 };
    let input = pack(&[7], Some(&[11]), 8, special).unwrap();
    let mut g = Graph::with_params(&store);
    let l1 = lexicon_encode(&mut g, &input, &params).unwrap();
    let (w, s, p) = (
        matrix(&get(&store, "encoder.word_emb")),
        matrix(&get(&store, "encoder.segment_emb")),
        matrix(&get(&store, "encoder.position_emb")),
    );
    for i in 0..input.len() {
        let expected: Vec<f64> = (0..4)
            .map(|c| w[input.token_ids[i]][c] + s[input.segment_ids[i]][c] + p[i][c])
            .collect();
        assert_close(g.value(l1).row(i).unwrap(), &expected, 1e-12);
    }
}

#[test]
fn one_layer_encoder_matches_straight_line_oracle() {
    let config = ModelConfig {
        max_len: 8,
        hidden_dropout: 0.0,
        ..ModelConfig::new(4, 1, 1, 12)
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, &config, &mut stream(0, Purpose::Init)).unwrap();
    fill_fixed(&mut store);
    let input = pack(&[5, 9], Some(&[6]), 8, SpecialIds { cls: 2, sep: 3 }).unwrap();
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &input, &params, false, &mut stream(0, Purpose::Dropout)).unwrap();
    let actual = g.value(out.hidden).data().to_vec();

    let p = |n: &str| get(&store, n);
    let (w, s, pos) = (
        matrix(&p("encoder.word_emb")),
        matrix(&p("encoder.segment_emb")),
        matrix(&p("encoder.position_emb")),
    );
    let x: Mat = (0..input.len())
        .map(|i| (0..4).map(|c| w[input.token_ids[i]][c] + s[input.segment_ids[i]][c] + pos[i][c]).collect())
        .collect();
    let linear = |x: &Mat, name: &str| -> Mat {
        let weight = matrix(&p(&format!("encoder.layer0.{name}.weight")));
        let bias = p(&format!("encoder.layer0.{name}.bias"));
        mm(x, &weight)
            .into_iter()
            .map(|row| row.iter().zip(bias.data()).map(|(a, b)| a + b).collect())
            .collect()
    };
    let (q, k, v) = (linear(&x, "attn.query"), linear(&x, "attn.key"), linear(&x, "attn.value"));
    let m = x.len();
    let mut context = vec![vec![0.0; 4]; m];
    for i in 0..m {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
            .collect();
        let weights = softmax(&scores);
        for j in 0..m {
            for c in 0..4 {
                context[i][c] += weights[j] * v[j][c];
            }
        }
    }
    let attn = linear(&context, "attn.output");
    let norm = |rows: &Mat, which: &str| -> Mat {
        let gain = p(&format!("encoder.layer0.{which}.norm.gain"));
        let bias = p(&format!("encoder.layer0.{which}.norm.bias"));
        rows.iter().map(|r| layer_norm(r, gain.data(), bias.data(), 1e-12)).collect()
    };
    let sum = |a: &Mat, b: &Mat| -> Mat {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
    };
    let x1 = norm(&sum(&x, &attn), "attn");
    let inner: Mat = linear(&x1, "ffn.input")
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let ff = linear(&inner, "ffn.output");
    let x2 = norm(&sum(&x1, &ff), "ffn");
    assert_close(&actual, &x2.concat(), 1e-10);
}

#[test]
fn san_matches_recurrence_oracle() {
    let (d, labels, steps) = (4, 3, 3);
    let mut store = ParamStore::new();
    let HeadParams::SanPairwise(head) =
        HeadParams::san(&mut store, "san", d, labels, steps, 0.0, &mut stream(0, Purpose::Init)).unwrap()
    else {
        unreachable!()
    };
    fill_fixed(&mut store);
    let premise: Mat = vec![vec![0.5, -0.2, 0.1, 0.9], vec![-0.4, 0.3, 0.8, -0.1]];
    let hypothesis: Mat = vec![vec![0.2, 0.7, -0.5, 0.3], vec![0.6, -0.3, 0.2, 0.4]];
    let mut g = Graph::with_params(&store);
    let mp = g.constant(Tensor::from_rows(&premise).unwrap()).unwrap();
    let mh = g.constant(Tensor::from_rows(&hypothesis).unwrap()).unwrap();
    let (out, trace) = san_forward(&mut g, mp, mh, &head, false, &mut stream(0, Purpose::Dropout)).unwrap();
    let actual = g.value(out).data().to_vec();

    let p = |n: &str| get(&store, n);
    let w1 = p("san.w_summary");
    let w2 = matrix(&p("san.w_attention"));
    let w3 = matrix(&p("san.w_output"));
    let (wi, wh) = (matrix(&p("san.gru.w_input")), matrix(&p("san.gru.w_hidden")));
    let (bi, bh) = (p("san.gru.b_input"), p("san.gru.b_hidden"));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let weighted = |weights: &[f64], rows: &Mat| -> Vec<f64> {
        (0..d).map(|c| weights.iter().zip(rows).map(|(w, r)| w * r[c]).sum()).collect()
    };

    let alpha = softmax(&hypothesis.iter().map(|r| dot(r, w1.data())).collect::<Vec<_>>());
    let mut state = weighted(&alpha, &hypothesis);
    let mut average = vec![0.0; labels];
    for k in 0..steps {
        let projected: Vec<f64> = w2.iter().map(|row| dot(row, &state)).collect();
        let beta = softmax(&premise.iter().map(|r| dot(r, &projected)).collect::<Vec<_>>());
        let read = weighted(&beta, &premise);
        if k > 0 {
            let gi: Vec<f64> = vec_mat(&read, &wi).iter().zip(bi.data()).map(|(a, b)| a + b).collect();
            let gh: Vec<f64> = vec_mat(&state, &wh).iter().zip(bh.data()).map(|(a, b)| a + b).collect();
            state = (0..d)
                .map(|c| {
                    let r = sigmoid(gi[c] + gh[c]);
                    let z = sigmoid(gi[d + c] + gh[d + c]);
                    let n = (gi[2 * d + c] + r * gh[2 * d + c]).tanh();
                    (1.0 - z) * n + z * state[c]
                })
                .collect();
        }
        let mut features = state.clone();
        features.extend(&read);
        features.extend(state.iter().zip(&read).map(|(s, x)| (s - x).abs()));
        features.extend(state.iter().zip(&read).map(|(s, x)| s * x));
        let probs = softmax(&vec_mat(&features, &w3));
        assert_close(&trace.steps[k].probs, &probs, 1e-10);
        for (a, q) in average.iter_mut().zip(&probs) {
            *a += q / steps as f64;
        }
    }
    assert_close(&actual, &average, 1e-10);
    assert!((actual.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn heads_match_direct_evaluation() {
    let mut rng = stream(5, Purpose::Init);
    let mut store = ParamStore::new();
    let HeadParams::Classification(cls) = HeadParams::classification(&mut store, "c", 4, 3, &mut rng).unwrap() else {
        unreachable!()
    };
    let HeadParams::Similarity(sim) = HeadParams::similarity(&mut store, "s", 4, &mut rng).unwrap() else {
        unreachable!()
    };
    let HeadParams::Ranking(rank) = HeadParams::ranking(&mut store, "r", 4, &mut rng).unwrap() else {
        unreachable!()
    };
    fill_fixed(&mut store);
    let x = vec![0.4, -1.2, 0.7, 2.0];
    let mut g = Graph::with_params(&store);
    let xv = g.constant(Tensor::vector(x.clone())).unwrap();
    let probs = classify_single(&mut g, xv, &cls).unwrap();
    let score = similarity(&mut g, xv, &sim).unwrap();
    let rel = relevance(&mut g, xv, &rank).unwrap();

    let w = matrix(store.value(cls.weight));
    assert_close(g.value(probs).data(), &softmax(&vec_mat(&x, &w)), 1e-12);
    let dot = |t: &Tensor| t.data().iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    assert_close(g.value(score).data(), &[dot(store.value(sim.weight))], 1e-12);
    assert_close(g.value(rel).data(), &[sigmoid(dot(store.value(rank.weight)))], 1e-12);
}

#[test]
fn relevance_of_unit_logit() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 0.0])).unwrap();
    let head = mtdnn::heads::RankingHead { weight: w };
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::vector(vec![1.0, 5.0])).unwrap();
    let r = relevance(&mut g, x, &head).unwrap();
    assert!((g.value(r).item().unwrap() - 0.731_058_578_630_004_9).abs() < 1e-15);
}

#[test]
fn losses_match_hand_values() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::vector(vec![1.0 / 3.0; 3])).unwrap();
    let ce = cross_entropy(&mut g, &[uniform], &[1], "t").unwrap();
    assert!((g.value(ce.value).item().unwrap() - 3f64.ln()).abs() < 1e-12);

    let preds = [0.3, -1.0, 2.5, 0.0, 4.0];
    let targets = [0.0, 1.0, 2.0, -3.0, 4.5];
    let vars: Vec<_> = preds.iter().map(|&p| g.constant(Tensor::scalar(p)).unwrap()).collect();
    let l = mse(&mut g, &vars, &targets, "t").unwrap();
    let expected = preds.iter().zip(&targets).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / 5.0;
    assert!((g.value(l.value).item().unwrap() - expected).abs() < 1e-12);

    let scores = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    let r = ranking_nll(&mut g, &[scores], &[vec![true, false]], 1.0, "t").unwrap();
    assert!((g.value(r.value).item().unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
}
