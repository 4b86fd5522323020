mod common;

use common::tiny;
use imp_core::layers::Linear;
use imp_core::manifest::{InMemoryModel, MetaValue, TensorSource};
use imp_core::multimodal::{assemble_prompt, render_turn, Connector, MultimodalModel};
use imp_core::toy::{toy_model, ToyConfig};
use imp_core::vision::{preprocess_image, PreprocessMode, RgbImage, VisionEncoder, VisualTokens};
use imp_core::{Error, Tensor};

fn gradient(w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        [(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8]
    })
}

fn cfg_at(res: usize) -> ToyConfig {
    ToyConfig {
        vit_n_layers: 1,
        vit_d_model: 16,
        vit_n_heads: 2,
        vit_d_ff: 32,
        image_res: res,
        ..tiny(1)
    }
}

#[test]
fn token_count_is_grid_squared() {
    for (res, want) in [(336, 576), (384, 729), (196, 196), (28, 4), (112, 64)] {
        let m = toy_model(&cfg_at(res)).unwrap();
        let enc = VisionEncoder::load(&m).unwrap();
        let v = enc.encode_rgb(&gradient(31, 17)).unwrap();
        assert_eq!(v.n_tokens, want, "res {res}");
        assert_eq!(v.features.shape(), &[want, 16]);
    }
}

#[test]
fn encoder_output_is_bitwise_repeatable() {
    let m = toy_model(&cfg_at(56)).unwrap();
    let enc = VisionEncoder::load(&m).unwrap();
    let img = gradient(40, 60);
    let a = enc.encode_rgb(&img).unwrap().features;
    let b = enc.encode_rgb(&img).unwrap().features;
    assert_eq!(a.data(), b.data());
}

#[test]
fn patch_embedding_is_position_agnostic() {
    let cfg = cfg_at(28);
    let mut m = toy_model(&cfg).unwrap();
    m.tensors
        .insert("vit.pos_embed".into(), Tensor::zeros(vec![4, 16]).unwrap());
    let enc = VisionEncoder::load(&m).unwrap();
    let img = gradient(28, 28);
    let pre = preprocess_image(&img, PreprocessMode::ResizeToSquare, 28, [0.5; 3], [0.5; 3]).unwrap();
    // swap patch (0,0) with patch (1,1)
    let px = pre.pixels.to_f32_vec().unwrap();
    let mut swapped = px.clone();
    for c in 0..3 {
        for dy in 0..14 {
            for dx in 0..14 {
                let a = c * 784 + dy * 28 + dx;
                let b = c * 784 + (14 + dy) * 28 + 14 + dx;
                swapped.swap(a, b);
            }
        }
    }
    let e0 = enc.embed_patches(&pre.pixels).unwrap();
    let e1 = enc
        .embed_patches(&Tensor::from_f32(vec![3, 28, 28], &swapped).unwrap())
        .unwrap();
    let row = |e: &[f32], i: usize| e[i * 16..(i + 1) * 16].to_vec();
    assert_eq!(row(&e0, 0), row(&e1, 3));
    assert_eq!(row(&e0, 3), row(&e1, 0));
    assert_eq!(row(&e0, 1), row(&e1, 1));
    assert_eq!(row(&e0, 2), row(&e1, 2));
}

#[test]
fn pos_embed_shape_mismatch_is_a_consistency_error() {
    let mut m = toy_model(&cfg_at(28)).unwrap();
    m.tensors
        .insert("vit.pos_embed".into(), Tensor::zeros(vec![5, 16]).unwrap());
    m.relayout().unwrap();
    assert!(matches!(VisionEncoder::load(&m), Err(Error::Consistency(_))));
}

fn dense(out: usize, inp: usize, w: &[f32], b: &[f32]) -> Linear {
    let m = InMemoryModel::new(
        vec![],
        vec![
            ("l.weight".into(), Tensor::from_f32(vec![out, inp], w).unwrap()),
            ("l.bias".into(), Tensor::from_f32(vec![out], b).unwrap()),
        ],
    )
    .unwrap();
    Linear::load(&m, "l", out, inp).unwrap()
}

fn tokens(rows: usize, dim: usize, v: &[f32]) -> VisualTokens {
    VisualTokens {
        features: Tensor::from_f32(vec![rows, dim], v).unwrap(),
        n_tokens: rows,
    }
}

#[test]
fn zero_connector_maps_to_zeros_and_keeps_rows() {
    let c = Connector::from_layers(dense(3, 2, &[0.0; 6], &[0.0; 3]), dense(4, 3, &[0.0; 12], &[0.0; 4])).unwrap();
    let v = tokens(729, 2, &vec![1.5; 1458]);
    let out = c.project(&v).unwrap();
    assert_eq!(out.shape(), &[729, 4]);
    assert!(out.to_f32_vec().unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn connector_matches_hand_computed_two_by_two() {
    // h = W1 x + b1 = [1·1 + 2·(−1) + 0.5, 0·1 + 1·(−1) − 0.5] = [−0.5, −1.5]
    // y = W2 gelu(h) + b2
    let w1 = [1.0, 2.0, 0.0, 1.0];
    let b1 = [0.5, -0.5];
    let w2 = [1.0, -1.0, 2.0, 0.5];
    let b2 = [0.0, 1.0];
    let c = Connector::from_layers(dense(2, 2, &w1, &b1), dense(2, 2, &w2, &b2)).unwrap();
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let (g0, g1) = (gelu(-0.5), gelu(-1.5));
    let want = [g0 - g1, 2.0 * g0 + 0.5 * g1 + 1.0];
    let got = c.project(&tokens(1, 2, &[1.0, -1.0])).unwrap().to_f32_vec().unwrap();
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
    }
}

#[test]
fn connector_dims_must_chain() {
    let r = Connector::from_layers(dense(3, 2, &[0.0; 6], &[0.0; 3]), dense(4, 2, &[0.0; 8], &[0.0; 4]));
    assert!(matches!(r, Err(Error::Consistency(_))));
}

#[test]
fn prompt_of_41_text_tokens_and_729_visual_rows_has_770_positions() {
    let m = toy_model(&tiny(3)).unwrap();
    let model = MultimodalModel::load(&m).unwrap();
    let image = model.tokenizer.special().image;
    let mut ids: Vec<u32> = (0..41).map(|i| 10 + i).collect();
    ids.insert(5, image);
    let visual = Tensor::zeros(vec![729, model.llm.config.d_model]).unwrap();
    let a = assemble_prompt(&model.llm, &ids, Some(&visual), image).unwrap();
    assert_eq!((a.n_text, a.n_visual, a.n_prompt), (41, 729, 770));
    assert_eq!(a.embeddings.len(), 770 * model.llm.config.d_model);
    let text_only = assemble_prompt(&model.llm, &ids[6..], None, image).unwrap();
    assert_eq!(text_only.n_prompt, 36);
}

#[test]
fn visual_rows_are_spliced_at_the_placeholder() {
    let m = toy_model(&tiny(3)).unwrap();
    let model = MultimodalModel::load(&m).unwrap();
    let d = model.llm.config.d_model;
    let image = model.tokenizer.special().image;
    let visual = Tensor::from_f32(vec![2, d], &vec![9.0; 2 * d]).unwrap();
    let a = assemble_prompt(&model.llm, &[7, image, 8], Some(&visual), image).unwrap();
    assert_eq!(a.embeddings[..d], model.llm.embed(7).unwrap()[..]);
    assert!(a.embeddings[d..3 * d].iter().all(|&v| v == 9.0));
    assert_eq!(a.embeddings[3 * d..], model.llm.embed(8).unwrap()[..]);
}

#[test]
fn placeholder_count_is_enforced_with_an_image() {
    let tok = imp_core::toy::toy_tokenizer(300);
    let two = "<image> and <image> {prompt}";
    assert!(matches!(
        render_turn(&tok, two, "hi", true, true),
        Err(Error::Template(_))
    ));
    assert!(matches!(
        render_turn(&tok, "{prompt}", "hi", true, true),
        Err(Error::Template(_))
    ));
    let ids = render_turn(&tok, "USER: <image>\n{prompt} ASSISTANT:", "<image>", true, false).unwrap();
    assert_eq!(ids.iter().filter(|&&i| i == tok.special().image).count(), 1);
}

#[test]
fn text_only_turn_counts_only_text() {
    let m = toy_model(&tiny(3)).unwrap();
    let model = MultimodalModel::load(&m).unwrap();
    let ids = model.render("what is this?", false, true).unwrap();
    assert!(!ids.contains(&model.tokenizer.special().image));
    let a = model.assemble(&ids, None).unwrap();
    assert_eq!(a.n_prompt, ids.len());
    assert_eq!(a.n_visual, 0);
}

#[test]
fn template_comes_from_metadata() {
    let mut m = toy_model(&tiny(3)).unwrap();
    m.manifest
        .set("llm.template", MetaValue::Str("<image>Q: {prompt}\nA:".into()));
    let model = MultimodalModel::load(&m).unwrap();
    let ids = model.render("x", true, false).unwrap();
    assert_eq!(ids[0], model.tokenizer.special().image);
    assert_eq!(model.tokenizer.decode(&ids[1..]).unwrap(), "Q: x\nA:");
    assert!(m.load_optional("vit.pos_embed").unwrap().is_some());
}
