//! Property tests for the library-level invariants: unit-norm embeddings,
//! multiset identities of corpus operations, budget safety of the clipping
//! operator, decision totality and loss finiteness.

use std::sync::OnceLock;

use proptest::prelude::*;

use mmfinger_core::corpus::{partition_by_label, prune_corpus, synth_toy_corpus};
use mmfinger_core::encoders::{DualEncoder, EncoderArch, Tokenizer};
use mmfinger_core::gop::{clip_apply, loss_adv, loss_con, loss_deviate, loss_near};
use mmfinger_core::tensor::Tensor;
use mmfinger_core::verify::{decide_ownership, psnr, ssim, OwnershipDecision, Thresholds};

fn tiny_encoder() -> &'static DualEncoder {
    static ENC: OnceLock<DualEncoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let tok = Tokenizer::build(["a photo of a crimson disk on a plain background"]);
        DualEncoder::new(
            EncoderArch {
                embed_dim: 16,
                conv1_ch: 4,
                conv2_ch: 6,
                txt_hidden: 12,
            },
            (16, 16),
            tok,
            3,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn image_embeddings_are_unit_norm(seed in 0u64..5000) {
        let mut rng = mmfinger_core::rng::Rng::new(seed);
        let img = Tensor::from_vec(
            &[3, 16, 16],
            (0..768).map(|_| rng.uniform()).collect(),
        );
        let e = tiny_encoder().embed_image(&img).unwrap();
        prop_assert!((e.l2_norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn text_embeddings_are_unit_norm(words in proptest::collection::vec(0usize..8, 1..6)) {
        let enc = tiny_encoder();
        let ids: Vec<usize> = words.iter().map(|w| 2 + w % (enc.tokenizer().vocab_size() - 2)).collect();
        let e = enc.embed_tokens(&ids).unwrap();
        prop_assert!((e.l2_norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn partition_then_union_is_identity(
        classes in 2usize..5,
        per_class in 1usize..5,
        seed in 0u64..1000,
    ) {
        let corpus = synth_toy_corpus(classes, per_class, (16, 16), seed).unwrap();
        let parts = partition_by_label(&corpus).unwrap();
        let mut rebuilt: Vec<u64> = parts
            .values()
            .flat_map(|p| p.samples().iter().map(|s| s.image.content_hash()))
            .collect();
        let mut original: Vec<u64> =
            corpus.samples().iter().map(|s| s.image.content_hash()).collect();
        rebuilt.sort_unstable();
        original.sort_unstable();
        prop_assert_eq!(rebuilt, original);
    }

    #[test]
    fn prune_is_sub_multiset_of_exact_size(
        ratio in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let corpus = synth_toy_corpus(3, 6, (16, 16), 42).unwrap();
        let pruned = prune_corpus(&corpus, ratio, seed).unwrap();
        let expect = ((1.0 - ratio) * corpus.len() as f64).ceil() as usize;
        prop_assert_eq!(pruned.len(), expect);
        let pool: std::collections::BTreeSet<u64> =
            corpus.samples().iter().map(|s| s.image.content_hash()).collect();
        for s in pruned.samples() {
            prop_assert!(pool.contains(&s.image.content_hash()));
        }
    }

    #[test]
    fn clip_apply_respects_budget_and_range(
        seed in 0u64..2000,
        sigma in 0.005f64..0.3,
    ) {
        let mut rng = mmfinger_core::rng::Rng::new(seed);
        let img = Tensor::from_vec(&[3, 4, 4], (0..48).map(|_| rng.uniform()).collect());
        let gen = Tensor::from_vec(&[3, 4, 4], (0..48).map(|_| rng.range(-2.0, 2.0)).collect());
        let out = clip_apply(&img, &gen, sigma).unwrap();
        prop_assert!(out.max_abs_diff(&img) <= sigma + 1e-12);
        prop_assert!(out.min() >= 0.0 && out.max() <= 1.0);
    }

    #[test]
    fn contrastive_losses_finite_for_finite_inputs(
        seed in 0u64..2000,
        n in 2usize..6,
        tau in 0.01f64..2.0,
    ) {
        let mut rng = mmfinger_core::rng::Rng::new(seed);
        let a = Tensor::randn(&[n, 8], 3.0, &mut rng);
        let b = Tensor::randn(&[n, 8], 3.0, &mut rng);
        prop_assert!(loss_deviate(&a, &b, tau).unwrap().is_finite());
        prop_assert!(loss_near(&a, &b, tau).unwrap().is_finite());
        prop_assert!(loss_con(&a, &b).unwrap().is_finite());
        let logits = Tensor::randn(&[n, 5], 1e4, &mut rng);
        prop_assert!(loss_adv(&logits, 2).unwrap().is_finite());
    }

    #[test]
    fn decision_is_total_and_unique(
        clean in 0.0f64..1.0,
        adv in 0.0f64..1.0,
        orig in 0.0f64..1.0,
    ) {
        let th = Thresholds::default();
        let d = decide_ownership(clean, adv, orig, &th);
        // exactly one case by construction of the enum; check consistency
        match d {
            OwnershipDecision::Uncertain => prop_assert!(clean < th.clean_floor),
            OwnershipDecision::Unverifiable => {
                prop_assert!(clean >= th.clean_floor && orig >= th.eps3)
            }
            OwnershipDecision::Violated => {
                prop_assert!(clean >= th.clean_floor && orig < th.eps3 && adv >= th.eps3)
            }
            OwnershipDecision::Unviolated => {
                prop_assert!(clean >= th.clean_floor && orig < th.eps3 && adv < th.eps3)
            }
        }
    }

    #[test]
    fn ssim_psnr_identity_and_symmetry(seed in 0u64..500) {
        let mut rng = mmfinger_core::rng::Rng::new(seed);
        let a = Tensor::from_vec(&[1, 12, 12], (0..144).map(|_| rng.uniform()).collect());
        let b = Tensor::from_vec(&[1, 12, 12], (0..144).map(|_| rng.uniform()).collect());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }
}
