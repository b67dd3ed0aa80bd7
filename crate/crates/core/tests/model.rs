use meshquery::hypothesis::HypothesisKind;
use meshquery::model::{mesh_fuse, HypothesisEncoding, Mode, Model, ModelConfig, PositionEncoding};
use meshquery::session::{Interaction, SessionRecord};
use meshquery::tokenizer::{pad_batch, TokenSequence, Vocab, BOS};
use meshquery::Error;
use ndarray::Array2;

fn vocab() -> Vocab {
    let corpus: Vec<String> = [
        "data engineer sydney",
        "senior data engineer",
        "python developer",
        "sql analyst melbourne",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Vocab::train(&corpus, 300).unwrap()
}

fn session() -> SessionRecord {
    SessionRecord {
        session_id: "u#0".into(),
        interactions: vec![
            Interaction::new("data engineer", &["senior data engineer"], 10),
            Interaction::new(
                "python developer",
                &["python developer sydney", "sql analyst"],
                20,
            ),
        ],
        ground_truth: Some("sql analyst melbourne".into()),
    }
}

fn config(v: &Vocab, mode: Mode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        max_positions: 96,
        vocab_size: v.len(),
        dropout_rate: 0.0,
        mode,
        ..ModelConfig::default()
    }
}

fn logits<F: meshquery::autograd::Float>(m: &Model<F>, inputs: &[TokenSequence]) -> Vec<f64> {
    let mem = m.memory(inputs).unwrap();
    m.decode_step(&mem, &[BOS, 7, 9])
        .unwrap()
        .into_iter()
        .map(|x| x.to_f64().unwrap())
        .collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn output_shapes() {
    let v = vocab();
    let m: Model<f32> = Model::new(config(&v, Mode::Mesh), 3).unwrap();
    let inputs = m.model_inputs(&session(), &v).unwrap();
    assert_eq!(inputs.len(), 4);
    let t = inputs[0].len();
    assert!(inputs.iter().all(|s| s.len() == t));
    let mem = m.memory(&inputs).unwrap();
    assert_eq!(mem.fused.dim(), (t, 16));
    assert_eq!(mem.attn_weights.as_ref().unwrap().dim(), (4, t));
    assert_eq!(m.decode_step(&mem, &[BOS]).unwrap().len(), v.len());
    assert!(matches!(
        m.decode_step(&mem, &[5]),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn pad_suffix_does_not_change_logits() {
    let v = vocab();
    for mode in [Mode::Mesh, Mode::Vanilla] {
        let m: Model<f64> = Model::new(config(&v, mode), 11).unwrap();
        let inputs = m.model_inputs(&session(), &v).unwrap();
        let t = inputs[0].len();
        let padded = pad_batch(&inputs, t + 5).unwrap();
        assert!(max_abs(&logits(&m, &inputs), &logits(&m, &padded)) < 1e-10);
    }
}

#[test]
fn init_is_seeded() {
    let v = vocab();
    let a: Model<f32> = Model::new(config(&v, Mode::Mesh), 5).unwrap();
    let b: Model<f32> = Model::new(config(&v, Mode::Mesh), 5).unwrap();
    let c: Model<f32> = Model::new(config(&v, Mode::Mesh), 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn mesh_parameter_count_adds_d_model() {
    let v = vocab();
    let mesh: Model<f32> = Model::new(config(&v, Mode::Mesh), 1).unwrap();
    let vanilla: Model<f32> = Model::new(config(&v, Mode::Vanilla), 1).unwrap();
    assert_eq!(mesh.num_parameters(), vanilla.num_parameters() + 16);
    let biased: Model<f32> = Model::new(
        ModelConfig {
            mesh_bias: true,
            ..config(&v, Mode::Mesh)
        },
        1,
    )
    .unwrap();
    assert_eq!(biased.num_parameters(), vanilla.num_parameters() + 17);
}

fn encoding(rows: &[&[f64]], valid: usize) -> HypothesisEncoding<f64> {
    let t = rows.len();
    let d = rows[0].len();
    HypothesisEncoding {
        states: Array2::from_shape_fn((t, d), |(i, j)| rows[i][j]),
        mask: (0..t).map(|i| i < valid).collect(),
    }
}

#[test]
fn zero_attention_weights_average_valid_hypotheses() {
    let encs: Vec<_> = (0..4)
        .map(|i| {
            encoding(
                &[&[i as f64, 1.0], &[2.0 * i as f64, 0.0], &[1.0, 1.0]],
                [3, 2, 1, 0][i],
            )
        })
        .collect();
    let w = Array2::<f64>::zeros((2, 1));
    let out = mesh_fuse(&encs, w.view()).unwrap();
    let alpha = out.attn_weights.unwrap();
    // position 0: hypotheses 0..3 valid
    for i in 0..3 {
        assert!((alpha[[i, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(alpha[[3, 0]], 0.0);
    assert!((out.fused[[0, 0]] - 1.0).abs() < 1e-12);
    // position 2: only hypothesis 0
    assert_eq!(alpha[[0, 2]], 1.0);
    assert_eq!(out.union_mask, vec![true, true, true]);
    assert!((out.fused[[1, 0]] - 1.0).abs() < 1e-12);
}

#[test]
fn all_invalid_position_is_zero_and_masked() {
    let encs: Vec<_> = (0..4)
        .map(|_| encoding(&[&[1.0, 2.0], &[3.0, 4.0]], 1))
        .collect();
    let w = Array2::from_elem((2, 1), 0.3);
    let out = mesh_fuse(&encs, w.view()).unwrap();
    assert_eq!(out.union_mask, vec![true, false]);
    assert_eq!(out.fused.row(1).to_vec(), vec![0.0, 0.0]);
    let a = out.attn_weights.unwrap();
    assert!((a.column(0).sum() - 1.0).abs() < 1e-12);
    assert_eq!(a.column(1).sum(), 0.0);
}

#[test]
fn fuse_rejects_mismatched_lengths() {
    let encs = vec![
        encoding(&[&[1.0]], 1),
        encoding(&[&[1.0]], 1),
        encoding(&[&[1.0]], 1),
        encoding(&[&[1.0], &[2.0]], 2),
    ];
    let w = Array2::<f64>::zeros((1, 1));
    assert!(matches!(mesh_fuse(&encs, w.view()), Err(Error::Shape(_))));
    assert!(mesh_fuse(&encs[..3], w.view()).is_err());
}

#[test]
fn four_copies_reduce_to_vanilla() {
    let v = vocab();
    for seed in 0..5 {
        let vanilla: Model<f64> = Model::new(config(&v, Mode::Vanilla), seed).unwrap();
        let mesh = vanilla.with_mode(Mode::Mesh, seed + 100).unwrap();
        let one = vanilla.model_inputs(&session(), &v).unwrap();
        let four = vec![one[0].clone(); 4];
        assert!(max_abs(&logits(&vanilla, &one), &logits(&mesh, &four)) < 1e-10);
    }
}

#[test]
fn zero_embeddings_give_uniform_loss() {
    let v = vocab();
    let mut m: Model<f64> = Model::new(config(&v, Mode::Mesh), 2).unwrap();
    m.param_mut("embed.tokens").unwrap().fill(0.0);
    let ex = m.example(&session(), &v).unwrap();
    let loss = m.forward_loss(std::slice::from_ref(&ex)).unwrap();
    assert!((loss - (v.len() as f64).ln()).abs() < 1e-9);
}

#[test]
fn batch_loss_is_token_weighted_mean() {
    let v = vocab();
    let m: Model<f64> = Model::new(config(&v, Mode::Mesh), 4).unwrap();
    let mut other = session();
    other.ground_truth = Some("data engineer".into());
    let exs = vec![
        m.example(&session(), &v).unwrap(),
        m.example(&other, &v).unwrap(),
    ];
    let (n0, n1) = (exs[0].target_tokens() as f64, exs[1].target_tokens() as f64);
    assert_ne!(n0, n1);
    let expected =
        (m.example_loss(&exs[0]).unwrap() * n0 + m.example_loss(&exs[1]).unwrap() * n1) / (n0 + n1);
    assert!((m.forward_loss(&exs).unwrap() - expected).abs() < 1e-12);
    let (l, _) = m.loss_and_grads(&exs, None).unwrap();
    assert!((l - expected).abs() < 1e-12);
}

#[test]
fn attention_weight_gradient_matches_finite_differences() {
    let v = vocab();
    let m: Model<f64> = Model::new(
        ModelConfig {
            init_std: 0.3,
            ..config(&v, Mode::Mesh)
        },
        8,
    )
    .unwrap();
    let ex = vec![m.example(&session(), &v).unwrap()];
    let (_, grads) = m.loss_and_grads(&ex, None).unwrap();
    let idx = m
        .param_names()
        .iter()
        .position(|n| n == "mesh.w_attn")
        .unwrap();
    let h = 1e-5;
    for r in 0..16 {
        let mut plus = m.clone();
        plus.params_mut()[idx][[r, 0]] += h;
        let mut minus = m.clone();
        minus.params_mut()[idx][[r, 0]] -= h;
        let fd = (plus.forward_loss(&ex).unwrap() - minus.forward_loss(&ex).unwrap()) / (2.0 * h);
        let g = grads[idx][[r, 0]];
        assert!(
            (fd - g).abs() <= 1e-6 * (1.0 + fd.abs()),
            "row {r}: fd {fd} vs {g}"
        );
    }
}

#[test]
fn gradients_are_reproducible() {
    let v = vocab();
    let m: Model<f32> = Model::new(
        ModelConfig {
            dropout_rate: 0.1,
            ..config(&v, Mode::Mesh)
        },
        8,
    )
    .unwrap();
    let ex: Vec<_> = (0..6).map(|_| m.example(&session(), &v).unwrap()).collect();
    let seeds: Vec<u64> = (0..6).collect();
    let a = m.loss_and_grads(&ex, Some(&seeds)).unwrap();
    let b = m.loss_and_grads(&ex, Some(&seeds)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = m.loss_and_grads(&ex, None).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn checkpoint_round_trip() {
    let v = vocab();
    for positions in [PositionEncoding::Learned, PositionEncoding::Sinusoidal] {
        let m: Model<f32> = Model::new(
            ModelConfig {
                positions,
                input_hypothesis: HypothesisKind::K3,
                ..config(&v, Mode::Mesh)
            },
            9,
        )
        .unwrap();
        let back: Model<f32> = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }
    assert!(Model::<f32>::from_json("{\"format\":\"other\"}").is_err());
}

#[test]
fn overlong_input_rejected() {
    let v = vocab();
    let m: Model<f32> = Model::new(
        ModelConfig {
            max_positions: 8,
            ..config(&v, Mode::Vanilla)
        },
        1,
    )
    .unwrap();
    let seq = TokenSequence::unpadded(vec![BOS; 9]);
    assert!(matches!(
        m.memory(&[seq]),
        Err(Error::Overlong { len: 9, limit: 8 })
    ));
}

#[test]
fn bad_config_rejected() {
    let v = vocab();
    let bad = [
        ModelConfig {
            n_heads: 3,
            ..config(&v, Mode::Mesh)
        },
        ModelConfig {
            dropout_rate: 1.0,
            ..config(&v, Mode::Mesh)
        },
        ModelConfig {
            d_model: 0,
            ..config(&v, Mode::Mesh)
        },
    ];
    for c in bad {
        assert!(matches!(Model::<f32>::new(c, 0), Err(Error::Config(_))));
    }
}
