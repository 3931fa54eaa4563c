//! Randomized invariants across the world, tokenizer, rewards, model and RL
//! loss.

use cyclegrpo::grpo::{advantages, clipped_surrogate};
use cyclegrpo::model::{kl_restricted, restricted_log_softmax, sample, Decoding, ModelConfig, Policy};
use cyclegrpo::rewards::{box_iou, clip_proxy, hps_proxy, match_layouts, reward_r1, reward_r2, RewardWeights};
use cyclegrpo::tokenizer::{
    build_prompt, build_sequence, decode_image, decode_layout, encode_image, encode_layout, DecodeMode, Direction,
    TokenMask, BOX_SEP, MAX_LAYOUT_BOXES, SEP, VOCAB_SIZE,
};
use cyclegrpo::world::{
    oracle_parse, overlap_score, rasterize, rasterize_boxes, sample_scene, BoxSpec, Difficulty, GridImage, Layout,
    WorldConfig, CELLS, GRID, NUM_CLASSES,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn any_box() -> impl Strategy<Value = BoxSpec> {
    (1..=NUM_CLASSES, 0..GRID as u8, 0..GRID as u8, 1..=GRID as u8, 1..=GRID as u8).prop_map(
        |(cls, a, b, w, h)| {
            let x1 = (a + w).min(GRID as u8);
            let y1 = (b + h).min(GRID as u8);
            BoxSpec::new(cls, a.min(x1 - 1), b.min(y1 - 1), x1, y1)
        },
    )
}

/// Boxes crowded into a corner with few classes, so that matchable pairs
/// are common.
fn crowded_box() -> impl Strategy<Value = BoxSpec> {
    (1..=2u8, 0..6u8, 0..6u8, 1..6u8, 1..6u8).prop_map(|(cls, x0, y0, w, h)| BoxSpec::new(cls, x0, y0, x0 + w, y0 + h))
}

fn any_image() -> impl Strategy<Value = GridImage> {
    prop::collection::vec(0..=NUM_CLASSES, CELLS).prop_map(|v| {
        let mut img = GridImage::blank();
        img.cells.copy_from_slice(&v);
        img
    })
}

fn any_layout(max: usize) -> impl Strategy<Value = Layout> {
    prop::collection::vec(any_box(), 0..=max).prop_map(Layout::new)
}

/// Best total IoU over all one-to-one partial assignments.
fn brute_force(pred: &[BoxSpec], gt: &[BoxSpec], used: &mut Vec<bool>) -> f64 {
    let Some((p, rest)) = pred.split_first() else {
        return 0.0;
    };
    let mut best = brute_force(rest, gt, used);
    for (j, g) in gt.iter().enumerate() {
        let iou = box_iou(p, g);
        if !used[j] && p.cls == g.cls && iou > 0.0 {
            used[j] = true;
            best = best.max(iou + brute_force(rest, gt, used));
            used[j] = false;
        }
    }
    best
}

fn small_policy(seed: u64) -> Policy {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        init_std: 0.3,
        zero_heads: false,
        ..ModelConfig::default()
    };
    Policy::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matcher_equals_brute_force(
        pred in prop::collection::vec(crowded_box(), 0..=6),
        gt in prop::collection::vec(crowded_box(), 0..=6),
    ) {
        let m = match_layouts(&Layout::new(pred.clone()), &Layout::new(gt.clone())).unwrap();
        let denom = pred.len().max(gt.len());
        let expected = if denom == 0 { 1.0 } else { brute_force(&pred, &gt, &mut vec![false; gt.len()]) / denom as f64 };
        prop_assert!((m.mean_iou - expected).abs() < 1e-12, "{} vs {}", m.mean_iou, expected);
        let mut seen_p = vec![false; pred.len()];
        let mut seen_g = vec![false; gt.len()];
        for &(i, j, iou) in &m.pairs {
            prop_assert!(!seen_p[i] && !seen_g[j]);
            seen_p[i] = true;
            seen_g[j] = true;
            prop_assert_eq!(pred[i].cls, gt[j].cls);
            prop_assert!(iou > 0.0);
        }
    }

    #[test]
    fn matcher_ignores_instance_order(
        (pred, pred_perm) in prop::collection::vec(crowded_box(), 0..=6).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        (gt, gt_perm) in prop::collection::vec(crowded_box(), 0..=6).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
    ) {
        let a = match_layouts(&Layout::new(pred), &Layout::new(gt)).unwrap().mean_iou;
        let b = match_layouts(&Layout::new(pred_perm), &Layout::new(gt_perm)).unwrap().mean_iou;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn box_iou_is_symmetric(a in any_box(), b in any_box()) {
        prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn layout_codec_round_trips_to_canonical(
        (layout, shuffled) in prop::collection::vec(any_box(), 0..=MAX_LAYOUT_BOXES)
            .prop_flat_map(|v| (Just(Layout::new(v.clone())), Just(v).prop_shuffle().prop_map(Layout::new))),
    ) {
        let tokens = encode_layout(&layout).unwrap();
        prop_assert_eq!(decode_layout(&tokens, DecodeMode::Strict).unwrap(), layout.canonical());
        prop_assert_eq!(encode_layout(&shuffled).unwrap(), tokens);
    }

    #[test]
    fn image_codec_round_trips(img in any_image()) {
        let tokens = encode_image(&img);
        prop_assert_eq!(tokens.len(), CELLS);
        prop_assert_eq!(decode_image(&tokens).unwrap(), img);
    }

    #[test]
    fn oracle_inverts_disjoint_scenes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&mut rng, seed, Difficulty::Simple, &WorldConfig::default()).unwrap();
        prop_assert_eq!(overlap_score(&scene), 0.0);
        let parsed = oracle_parse(&rasterize(&scene));
        prop_assert_eq!(match_layouts(&parsed, &scene.layout()).unwrap().mean_iou, 1.0);
    }

    #[test]
    fn sampled_scenes_meet_their_tier(seed in any::<u64>(), tier in 0..3usize) {
        let difficulty = Difficulty::ALL[tier];
        let world = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&mut rng, 0, difficulty, &world).unwrap();
        prop_assert!(difficulty.contains(overlap_score(&scene)));
        prop_assert!((1..=5).contains(&scene.boxes.len()));
        for b in &scene.boxes {
            prop_assert!(b.is_valid() && b.width() >= 2 && b.height() >= 2);
        }
        let img = rasterize(&scene);
        prop_assert!(img.cells.iter().all(|&c| c <= NUM_CLASSES));
    }

    #[test]
    fn reward_components_are_bounded(
        pred in any_layout(5),
        gt in any_layout(5),
        a in any_image(),
        b in any_image(),
        lambdas in (0.0..3.0f64, 0.0..3.0f64, 0.0..3.0f64),
        bump in 0.0..1.0f64,
    ) {
        let w = RewardWeights { lambda_iou: lambdas.0, lambda_clip: lambdas.1, lambda_hps: lambdas.2 };
        let r1 = reward_r1(&pred, &gt, &a, &b, &w).unwrap();
        let r2 = reward_r2(&pred, &gt, &a, &w).unwrap();
        for v in [r1.iou, r1.clip_proxy, r2.iou, r2.hps_proxy].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v), "component {}", v);
        }
        prop_assert!(r1.total >= 0.0 && r1.total <= w.lambda_iou + w.lambda_clip + 1e-12);
        prop_assert!(r2.total >= 0.0 && r2.total <= w.lambda_iou + w.lambda_hps + 1e-12);
        // Raising any weight never lowers a total.
        for k in 0..3 {
            let mut up = w;
            match k {
                0 => up.lambda_iou += bump,
                1 => up.lambda_clip += bump,
                _ => up.lambda_hps += bump,
            }
            prop_assert!(reward_r1(&pred, &gt, &a, &b, &up).unwrap().total >= r1.total);
            prop_assert!(reward_r2(&pred, &gt, &a, &up).unwrap().total >= r2.total);
        }
    }

    #[test]
    fn clip_proxy_of_identical_images_is_one(img in any_image()) {
        prop_assert_eq!(clip_proxy(&img, &img), 1.0);
    }

    #[test]
    fn hps_is_one_on_covering_disjoint_scenes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&mut rng, 0, Difficulty::Simple, &WorldConfig::default()).unwrap();
        let img = rasterize_boxes(&scene.boxes);
        prop_assume!(img.painted() >= 16);
        prop_assert_eq!(hps_proxy(&img), 1.0);
    }

    #[test]
    fn advantages_are_centered_and_scaled(rewards in prop::collection::vec(0.0..3.0f64, 2..16)) {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        for eps in [0.0, 1e-8] {
            let a = advantages(&rewards, eps).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            if sd > 1e-6 {
                let var = a.iter().map(|x| x * x).sum::<f64>() / n;
                // The stabilizer shrinks the scale by sd / (sd + eps).
                let expected = (sd / (sd + eps)).powi(2);
                prop_assert!((var - expected).abs() < 1e-9, "var {} expected {}", var, expected);
                if eps == 0.0 {
                    prop_assert!((var - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_groups_have_zero_advantage(r in 0.0..3.0f64, g in 2..16usize) {
        prop_assert!(advantages(&vec![r; g], 1e-8).unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn clipping_is_inert_inside_the_band(eps in 0.01..0.99f64, t in 0.0..=1.0f64, adv in -5.0..5.0f64) {
        let ratio = (1.0 - eps) + t * 2.0 * eps;
        let ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
        let (value, active) = clipped_surrogate(ratio, adv, eps);
        prop_assert_eq!(value.to_bits(), (ratio * adv).to_bits());
        prop_assert!(active);
    }

    #[test]
    fn restricted_kl_is_nonnegative(
        p in prop::collection::vec(-6.0..6.0f64, VOCAB_SIZE),
        q in prop::collection::vec(-6.0..6.0f64, VOCAB_SIZE),
        allowed in prop::collection::vec(any::<bool>(), VOCAB_SIZE),
        pick in 0..VOCAB_SIZE,
        temperature in 0.2..3.0f64,
    ) {
        let mut mask: TokenMask = [false; VOCAB_SIZE];
        mask.copy_from_slice(&allowed);
        mask[pick] = true;
        let lp = restricted_log_softmax(&p, &mask, temperature);
        let lq = restricted_log_softmax(&q, &mask, temperature);
        let total: f64 = (0..VOCAB_SIZE).filter(|&v| mask[v]).map(|v| lp[v].exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(kl_restricted(&lp, &lp, &mask), 0.0);
        prop_assert!(kl_restricted(&lp, &lq, &mask) >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn logits_never_see_the_future(
        seed in 0..1000u64,
        layout in any_layout(4),
        img in any_image(),
        gen in any::<bool>(),
        cut in 0.0..1.0f64,
        replacement in 7u8..VOCAB_SIZE as u8,
    ) {
        let policy = small_policy(seed);
        let direction = if gen { Direction::Gen } else { Direction::Und };
        let seq = build_sequence(direction, &encode_image(&img), &encode_layout(&layout).unwrap(), 320).unwrap();
        let t = 1 + ((seq.len() - 2) as f64 * cut) as usize;
        prop_assume!(seq.ids[t] != replacement && seq.ids[t] != SEP && replacement != BOX_SEP);
        let mut other = seq.clone();
        other.ids[t] = replacement;
        let a = policy.forward(&seq).unwrap().logits;
        let b = policy.forward(&other).unwrap().logits;
        for r in 0..a.rows() {
            if a.positions[r] <= t {
                prop_assert_eq!(a.row(r), b.row(r), "row for position {} moved", a.positions[r]);
            }
        }
    }

    #[test]
    fn grammar_constrained_samples_parse(seed in 0..1000u64, layout in any_layout(3), temperature in 0.5..2.0f64) {
        let policy = small_policy(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoding = Decoding::Sample { temperature };
        let img = rasterize_boxes(&layout.instances);
        let und = sample(&policy, &build_prompt(Direction::Und, &encode_image(&img)), Direction::Und, decoding, &mut rng).unwrap();
        prop_assert!(decode_layout(&und.tokens, DecodeMode::Strict).is_ok());
        prop_assert!(und.logprobs.iter().all(|&l| l.is_finite() && l <= 0.0));
        let prompt = build_prompt(Direction::Gen, &encode_layout(&layout).unwrap());
        let gen = sample(&policy, &prompt, Direction::Gen, decoding, &mut rng).unwrap();
        prop_assert_eq!(gen.tokens.len(), CELLS + 1);
        prop_assert!(decode_image(&gen.tokens[..CELLS]).is_ok());
    }
}
