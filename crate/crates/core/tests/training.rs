//! Training-level behaviour of the extraction pipeline: retrieval quality of
//! fine-tuned encoders, perturbation drift and flips on the surrogate,
//! prompt alignment, and the malicious/benign separation the whole scheme
//! exists for. Heavy fixtures (trained models, artifacts) are built once and
//! shared.

use std::sync::OnceLock;

use mmfinger_core::corpus::{select_pair, synth_toy_corpus, LabeledCorpus, MultimodalSample};
use mmfinger_core::encoders::{
    cosine_sim, make_model_pair_from, DualEncoder, EncoderArch, Tokenizer, TOY_FT_EPOCHS, TOY_FT_LR,
};
use mmfinger_core::gop::{train_gop, GopArtifact, GopTrace, GopTrainConfig};
use mmfinger_core::prompt::{
    build_gop_corpus, class_prompts_for, predict_prob, train_prompt, PromptArtifact, PromptConfig,
};
use mmfinger_core::tensor::Tensor;
use mmfinger_core::verify::{run_verification, Direction, OwnershipDecision, Thresholds};

const PROTECTED_SEED: u64 = 13;
const OTHER_SEED: u64 = 33;
const K_O: usize = 0;
const K_ADV: usize = 3;

fn toy_gop_config() -> GopTrainConfig {
    // Paper-default weights and budget; the step schedule is scaled to the
    // 16-image toy class (an epoch is a single optimizer step here).
    GopTrainConfig {
        epochs: 300,
        lr_g: 1e-2,
        lr_d: 1e-4,
        ..Default::default()
    }
}

struct Fixture {
    protected: LabeledCorpus,
    other: LabeledCorpus,
    base: DualEncoder,
    surrogate: DualEncoder,
    malicious: DualEncoder,
    benign: DualEncoder,
    gop: GopArtifact,
    gop_trace: GopTrace,
    prompt: PromptArtifact,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let protected = synth_toy_corpus(8, 16, (32, 32), PROTECTED_SEED).unwrap();
        let other = synth_toy_corpus(8, 16, (32, 32), OTHER_SEED).unwrap();
        let base = DualEncoder::new(
            EncoderArch::default(),
            (32, 32),
            Tokenizer::from_corpus(&protected),
            1,
        )
        .unwrap();
        let (surrogate, _) = base
            .clone()
            .fine_tune(&protected, TOY_FT_EPOCHS, TOY_FT_LR, 7)
            .unwrap();
        let (malicious, benign) =
            make_model_pair_from(base.clone(), &protected, &other, 99).unwrap();

        let names = protected.class_names().to_vec();
        let (src, tgt) = select_pair(&protected, &names[K_O], &names[K_ADV]).unwrap();
        let (gop, gop_trace) = train_gop(&src, &tgt, &surrogate, &toy_gop_config()).unwrap();
        let gcorpus = build_gop_corpus(&protected, &gop, surrogate.tokenizer()).unwrap();
        let (state, _) = train_prompt(&surrogate, &gcorpus, &PromptConfig::default()).unwrap();
        let prompt = PromptArtifact {
            state,
            k_o: gop.k_o.clone(),
            k_adv: gop.k_adv.clone(),
            seed: 0,
            surrogate_hash: gop.surrogate_hash.clone(),
        };
        Fixture {
            protected,
            other,
            base,
            surrogate,
            malicious,
            benign,
            gop,
            gop_trace,
            prompt,
        }
    })
}

/// Image→caption retrieval over all corpus captions, counted at class level
/// (identical template captions make sample-level identity ill-posed).
fn caption_r1(enc: &DualEncoder, corpus: &LabeledCorpus) -> f64 {
    use mmfinger_core::verify::SimilarityScorer;
    let caps: Vec<String> = corpus.samples().iter().map(|s| s.caption.clone()).collect();
    let mut hits = 0;
    for s in corpus.samples() {
        let scores = enc.similarities(&s.image, &caps).unwrap();
        let best = argmax(&scores);
        if corpus.samples()[best].label == s.label {
            hits += 1;
        }
    }
    hits as f64 / corpus.len() as f64
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

#[test]
fn fine_tune_reaches_retrieval_target() {
    let fix = fixture();
    // the toy quality bar: 30 epochs on the 8x16 corpus reach R@1 >= 0.9
    let (enc, trace) = fix
        .base
        .clone()
        .fine_tune(&fix.protected, 30, TOY_FT_LR, 5)
        .unwrap();
    let r1 = caption_r1(&enc, &fix.protected);
    assert!(r1 >= 0.9, "caption R@1 {r1} below 0.9 after 30 epochs");
    let first = trace.first().unwrap();
    let last = trace.last().unwrap();
    assert!(last < first, "loss trend not decreasing: {first} -> {last}");
}

#[test]
fn model_pair_differs_and_separates() {
    let fix = fixture();
    assert_ne!(fix.malicious.param_hash(), fix.benign.param_hash());
    let r1 = caption_r1(&fix.malicious, &fix.protected);
    assert!(r1 >= 0.9, "malicious R@1 {r1} on its training pairs");
}

#[test]
fn benign_with_mismatched_motifs_is_near_chance() {
    let fix = fixture();
    // Relabel the other corpus cyclically: motif of class i carries the name
    // and caption of class i+1, so learned associations are wrong on the
    // protected corpus.
    let names = fix.other.class_names().to_vec();
    let k = names.len();
    let samples: Vec<MultimodalSample> = fix
        .other
        .samples()
        .iter()
        .map(|s| {
            let new_label = (s.label + 1) % k;
            MultimodalSample {
                image: s.image.clone(),
                caption: format!("a photo of a {}", names[new_label]),
                label: new_label,
            }
        })
        .collect();
    let mismatched = LabeledCorpus::new(samples, names, fix.other.image_shape()).unwrap();
    let (_, benign) =
        make_model_pair_from(fix.base.clone(), &fix.protected, &mismatched, 41).unwrap();
    let r1 = caption_r1(&benign, &fix.protected);
    let chance = 1.0 / k as f64;
    assert!(
        r1 <= chance + 0.2,
        "mismatched-motif benign R@1 {r1} above chance+0.2"
    );
}

#[test]
fn gop_artifact_well_formed_and_within_budget() {
    let fix = fixture();
    let t = &fix.gop_trace;
    for series in [
        &t.loss_g,
        &t.loss_d1,
        &t.loss_d2,
        &t.loss_deviate,
        &t.loss_near,
        &t.loss_adv,
        &t.loss_con,
    ] {
        assert!(!series.is_empty());
        assert!(
            series.iter().all(|v| v.is_finite()),
            "non-finite loss in trace"
        );
    }
    assert!(
        t.max_abs_dev <= fix.gop.sigma + 1e-6,
        "budget exceeded: {}",
        t.max_abs_dev
    );
    assert!(
        t.out_min >= 0.0 && t.out_max <= 1.0,
        "range [{}, {}]",
        t.out_min,
        t.out_max
    );

    // every applied query obeys the budget as well
    for s in fix.protected.samples() {
        let adv = fix.gop.apply(&s.image).unwrap();
        assert!(adv.max_abs_diff(&s.image) <= fix.gop.sigma + 1e-6);
        assert!(adv.min() >= 0.0 && adv.max() <= 1.0);
    }
}

#[test]
fn gop_shifts_embeddings_toward_target() {
    let fix = fixture();
    let names = fix.protected.class_names().to_vec();
    let (src, tgt) = select_pair(&fix.protected, &names[K_O], &names[K_ADV]).unwrap();

    // reference pattern: a run with a vanishing learning rate stays at the
    // generator's initial output
    let untrained_cfg = GopTrainConfig {
        epochs: 1,
        lr_g: 1e-12,
        lr_d: 1e-12,
        ..Default::default()
    };
    let (untrained, _) = train_gop(&src, &tgt, &fix.surrogate, &untrained_cfg).unwrap();

    let mean_cos = |artifact: &GopArtifact, against: &LabeledCorpus| -> (f64, f64) {
        let mut to_clean = 0.0;
        let mut to_target = 0.0;
        for (s, t) in src.samples().iter().zip(against.samples()) {
            let adv = artifact.apply(&s.image).unwrap();
            let e_adv = fix.surrogate.embed_image(&adv).unwrap();
            let e_clean = fix.surrogate.embed_image(&s.image).unwrap();
            let e_tgt = fix.surrogate.embed_image(&t.image).unwrap();
            to_clean += cosine_sim(&e_adv, &e_clean).unwrap();
            to_target += cosine_sim(&e_adv, &e_tgt).unwrap();
        }
        (to_clean / src.len() as f64, to_target / src.len() as f64)
    };
    let (clean_before, target_before) = mean_cos(&untrained, &tgt);
    let (clean_after, target_after) = mean_cos(&fix.gop, &tgt);
    assert!(
        clean_after < clean_before,
        "cos to clean did not drop: {clean_before} -> {clean_after}"
    );
    assert!(
        target_after > target_before,
        "cos to target did not rise: {target_before} -> {target_after}"
    );
}

#[test]
fn gop_flips_caption_retrieval_on_surrogate() {
    use mmfinger_core::verify::SimilarityScorer;
    let fix = fixture();
    let names = fix.protected.class_names().to_vec();
    let (src, _) = select_pair(&fix.protected, &names[K_O], &names[K_ADV]).unwrap();
    let caps: Vec<String> = fix
        .protected
        .samples()
        .iter()
        .map(|s| s.caption.clone())
        .collect();
    let mut flips = 0;
    for s in src.samples() {
        let adv = fix.gop.apply(&s.image).unwrap();
        let scores = fix.surrogate.similarities(&adv, &caps).unwrap();
        if fix.protected.samples()[argmax(&scores)].label == K_ADV {
            flips += 1;
        }
    }
    let rate = flips as f64 / src.len() as f64;
    assert!(rate >= 0.6, "nearest-caption flip rate {rate} below 0.6");
}

#[test]
fn gop_training_is_deterministic() {
    let fix = fixture();
    let names = fix.protected.class_names().to_vec();
    let (src, tgt) = select_pair(&fix.protected, &names[K_O], &names[K_ADV]).unwrap();
    let cfg = GopTrainConfig {
        epochs: 8,
        ..toy_gop_config()
    };
    let (a, _) = train_gop(&src, &tgt, &fix.surrogate, &cfg).unwrap();
    let (b, _) = train_gop(&src, &tgt, &fix.surrogate, &cfg).unwrap();
    assert_eq!(
        a.delta, b.delta,
        "same seed and config must give bit-identical delta"
    );
    assert_eq!(a.content_hash(), b.content_hash());
}

#[test]
fn prompt_alignment_improves_adversarial_mass() {
    let fix = fixture();
    let gcorpus = build_gop_corpus(&fix.protected, &fix.gop, fix.surrogate.tokenizer()).unwrap();
    let cfg = PromptConfig::default();
    let zero_steps = PromptConfig {
        steps: 0,
        proj_steps: 0,
        ..cfg.clone()
    };
    let (init_state, _) = train_prompt(&fix.surrogate, &gcorpus, &zero_steps).unwrap();
    let (trained_state, trace) = train_prompt(&fix.surrogate, &gcorpus, &cfg).unwrap();

    let mass = |p_c: &Tensor| -> f64 {
        let prompts = class_prompts_for(&fix.surrogate, p_c, &gcorpus.class_names).unwrap();
        let mut total = 0.0;
        for img in &gcorpus.adv_images {
            let e = fix.surrogate.embed_image(img).unwrap();
            total += predict_prob(&fix.surrogate, &e, &prompts, fix.surrogate.tau()).unwrap()
                [gcorpus.k_adv];
        }
        total / gcorpus.adv_images.len() as f64
    };
    let before = mass(&init_state.p_c);
    let after = mass(&trained_state.p_c);
    assert!(
        after > before,
        "adversarial mass did not increase: {before} -> {after}"
    );
    assert!(
        trace.loss.last().unwrap() < trace.loss.first().unwrap(),
        "prompt loss did not decrease"
    );
}

#[test]
fn prompt_zero_steps_keeps_initialization() {
    let fix = fixture();
    let gcorpus = build_gop_corpus(&fix.protected, &fix.gop, fix.surrogate.tokenizer()).unwrap();
    let cfg = PromptConfig {
        steps: 0,
        proj_steps: 0,
        ..Default::default()
    };
    let (state, trace) = train_prompt(&fix.surrogate, &gcorpus, &cfg).unwrap();
    assert!(trace.loss.is_empty());
    // literal "a photo of a" rows straight from the embedding table
    let ids = fix.surrogate.tokenizer().tokenize("a photo of a");
    let d = fix.surrogate.embed_dim();
    for (i, &id) in ids.iter().enumerate().take(4) {
        let expect = &fix.surrogate.token_embed().data()[id * d..(id + 1) * d];
        assert_eq!(&state.p_c.data()[i * d..(i + 1) * d], expect, "row {i}");
    }
}

#[test]
fn prompt_training_deterministic_across_seeds_with_literal_init() {
    let fix = fixture();
    let gcorpus = build_gop_corpus(&fix.protected, &fix.gop, fix.surrogate.tokenizer()).unwrap();
    let short = PromptConfig {
        steps: 20,
        proj_steps: 10,
        ..Default::default()
    };
    let (a, _) = train_prompt(&fix.surrogate, &gcorpus, &short).unwrap();
    let (b, _) = train_prompt(
        &fix.surrogate,
        &gcorpus,
        &PromptConfig { seed: 777, ..short },
    )
    .unwrap();
    // identical init and data order: the continuous prompt is seed-independent
    assert_eq!(a.p_c, b.p_c);
}

#[test]
fn end_to_end_separation_on_model_pair() {
    let fix = fixture();
    let th = Thresholds::default();
    let verify = |model: &DualEncoder| {
        run_verification(
            &fix.protected,
            &fix.gop,
            &fix.prompt,
            fix.surrogate.tokenizer(),
            model,
            &th,
            &[1, 5],
            Direction::ImageToText,
        )
        .unwrap()
    };
    let mal = verify(&fix.malicious);
    let ben = verify(&fix.benign);
    let mal_v = mal.image_to_text.as_ref().unwrap().vsr_at_k[&1];
    let ben_v = ben.image_to_text.as_ref().unwrap().vsr_at_k[&1];
    assert_eq!(
        mal.decision,
        OwnershipDecision::Violated,
        "malicious: {mal:?}"
    );
    assert_eq!(
        ben.decision,
        OwnershipDecision::Unviolated,
        "benign: {ben:?}"
    );
    assert!(mal_v - ben_v >= 0.5, "separation {mal_v} - {ben_v} < 0.5");
    assert!(ben_v <= 0.15, "benign VSR {ben_v} above 0.15");
}

#[test]
fn text_to_image_direction_mirrors_separation() {
    let fix = fixture();
    let th = Thresholds::default();
    let verify = |model: &DualEncoder| {
        run_verification(
            &fix.protected,
            &fix.gop,
            &fix.prompt,
            fix.surrogate.tokenizer(),
            model,
            &th,
            &[1, 5],
            Direction::Both,
        )
        .unwrap()
    };
    let mal = verify(&fix.malicious);
    let ben = verify(&fix.benign);
    let mal_ti = mal.text_to_image.as_ref().unwrap();
    let ben_ti = ben.text_to_image.as_ref().unwrap();
    // fingerprint images must never look *more* adversarial on the benign
    // model, and only the benign model should still retrieve them for the
    // original-label description
    assert!(
        mal_ti.vsr_at_k[&5] >= ben_ti.vsr_at_k[&5],
        "TI ordering broken: malicious {:?} vs benign {:?}",
        mal_ti.vsr_at_k,
        ben_ti.vsr_at_k
    );
    assert!(
        ben_ti.recovery_at_k[&1] > mal_ti.recovery_at_k[&1],
        "original description should keep retrieving fingerprint images only on the benign model"
    );
}

#[test]
fn cross_architecture_smoke() {
    let fix = fixture();
    // a black-box suspect with a different tower architecture, same corpus
    let wide = DualEncoder::new(
        EncoderArch::wide(),
        (32, 32),
        Tokenizer::from_corpus(&fix.protected),
        51,
    )
    .unwrap();
    let (mal_wide, ben_wide) = make_model_pair_from(wide, &fix.protected, &fix.other, 52).unwrap();
    let th = Thresholds::default();
    let verify = |model: &DualEncoder| {
        run_verification(
            &fix.protected,
            &fix.gop,
            &fix.prompt,
            fix.surrogate.tokenizer(),
            model,
            &th,
            &[1],
            Direction::ImageToText,
        )
        .unwrap()
    };
    let mal = verify(&mal_wide);
    let ben = verify(&ben_wide);
    let mal_v = mal.image_to_text.as_ref().unwrap().vsr_at_k[&1];
    let ben_v = ben.image_to_text.as_ref().unwrap().vsr_at_k[&1];
    // directional only: the fingerprint must never look *more* present on the
    // benign model, and the benign model must not read as violated
    assert!(
        mal_v >= ben_v,
        "cross-arch ordering broken: {mal_v} vs {ben_v}"
    );
    assert_ne!(
        ben.decision,
        OwnershipDecision::Violated,
        "benign flagged: {ben:?}"
    );
}

#[test]
fn prompt_length_ablation_within_margin() {
    let fix = fixture();
    let gcorpus = build_gop_corpus(&fix.protected, &fix.gop, fix.surrogate.tokenizer()).unwrap();
    let th = Thresholds::default();
    let mut vsr_by_len = Vec::new();
    for n in [4usize, 8, 16] {
        let cfg = PromptConfig {
            n,
            ..Default::default()
        };
        let (state, _) = train_prompt(&fix.surrogate, &gcorpus, &cfg).unwrap();
        let prompt = PromptArtifact {
            state,
            k_o: fix.gop.k_o.clone(),
            k_adv: fix.gop.k_adv.clone(),
            seed: 0,
            surrogate_hash: fix.gop.surrogate_hash.clone(),
        };
        let rep = run_verification(
            &fix.protected,
            &fix.gop,
            &prompt,
            fix.surrogate.tokenizer(),
            &fix.malicious,
            &th,
            &[1],
            Direction::ImageToText,
        )
        .unwrap();
        vsr_by_len.push(rep.image_to_text.unwrap().vsr_at_k[&1]);
    }
    let v4 = vsr_by_len[0];
    for (i, n) in [8usize, 16].iter().enumerate() {
        assert!(
            v4 >= vsr_by_len[i + 1] - 0.05,
            "length-4 prompt trails n={n} by more than 5 points: {v4} vs {}",
            vsr_by_len[i + 1]
        );
    }
}
