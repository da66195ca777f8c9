use conpe::contrast::*;
use conpe::encoder::*;
use conpe::ensemble::*;
use conpe::harness::*;
use conpe::optim::Adam;
use conpe::pipeline::*;
use conpe::policy::*;
use conpe::prompt::*;
use conpe::world::*;

fn main() {
    let full = FactorRanges::full();
    let split = make_split(5, &full, SplitCounts { source: 4, seen_target: 6, unseen_target: 8 }, UnseenMode::Tail).unwrap();
    let maps: Vec<GridMap> = [1u64, 2, 3].iter().map(|&s| generate_map(s, 7).unwrap()).collect();
    let encoder = init_encoder(&EncoderConfig { init_std: 0.32, seed: 7, ..Default::default() }).unwrap();
    let task = Task::ObjectGoal { color: 0 };

    let t0 = std::time::Instant::now();
    let mut prompts = Vec::new();
    for factor in FactorId::ALL {
        let domains = factor_variation_domains(factor, &split.seen_ranges, 4, 11 ^ u64::from(factor.code())).unwrap();
        let ds = if factor.is_color() {
            collect_aligned_episodes(&maps, &domains, &task, 3, 13 ^ u64::from(factor.code()), false, 6).unwrap()
        } else {
            collect_episodes(&maps, &domains, &task, 3, 13 ^ u64::from(factor.code()), false).unwrap()
        };
        let aug = clipped_aug_ranges(&AugRanges::default(), &split.seen_ranges);
        let stream = match contrast_kind_for(factor) {
            ContrastKind::Behavior => behavior_pairs(&ds).unwrap(),
            ContrastKind::Augmentation => augmentation_pairs(&ds, &aug, 17).unwrap(),
            ContrastKind::Timestep => timestep_pairs(&ds, 3).unwrap(),
        };
        let contrast = ContrastConfig { kind: stream.kind(), m: 12, timestep_k: 3, aug, seed: 19 };
        let train = PromptTrainConfig {
            epochs: 4, batches_per_epoch: 40, batch_size: 12, batch_size_augmentation: 12,
            learning_rate: 2e-3, lambda: 1.0, similarity: SimilarityMode::Literal, prompt_len: 8,
            seed: 23 ^ u64::from(factor.code()),
        };
        let mut p = train_prompt(factor, &stream, &contrast, &train, &encoder).unwrap();
        quantize_to_f32(&mut p);
        // invariance gain on held-out data
        let ho_domains = factor_variation_domains(factor, &split.seen_ranges, 2, 311 ^ u64::from(factor.code())).unwrap();
        let ho = if factor.is_color() {
            collect_aligned_episodes(&maps, &ho_domains, &task, 2, 313, false, 6).unwrap()
        } else {
            collect_episodes(&maps, &ho_domains, &task, 2, 313, false).unwrap()
        };
        let ho_stream = match contrast_kind_for(factor) {
            ContrastKind::Behavior => behavior_pairs(&ho).unwrap(),
            ContrastKind::Augmentation => augmentation_pairs(&ho, &clipped_aug_ranges(&AugRanges::default(), &split.seen_ranges), 41).unwrap(),
            ContrastKind::Timestep => timestep_pairs(&ho, 3).unwrap(),
        };
        let gain = prompt_invariance_gain(&encoder, &p, &ho_stream, &ho, 48, 43).unwrap();
        println!("factor {:<16} gain {gain:+.4}", factor.name());
        prompts.push(p);
    }
    let pool = build_pool(prompts).unwrap();
    println!("prompt phase: {:.0?}", t0.elapsed());

    let source: Vec<DomainSpec> = split.source.iter().map(|(_, s)| s.clone()).collect();
    let dcfg = DaggerConfig { rounds: 4, steps_per_round: 600, bc_epochs: 60, batch_size: 64, learning_rate: 3e-3, seed: 0 };
    let mut unseen_results = Vec::new();
    for (arm, use_pool) in [("conpe", true), ("control", false)] {
        let t1 = std::time::Instant::now();
        let mut policy = PolicyParams::init(64 + 4, 11);
        let path = if use_pool { StatePath::Guided } else { StatePath::Control };
        let mut attention = use_pool.then(|| AttentionParams::init(pool.len(), 64, 77, false));
        let ctx = DaggerContext {
            encoder: &encoder, pool: use_pool.then_some(&pool), maps: &maps, domains: &source,
            task, embed: None,
        };
        let mut aggregate = BcBatch::default();
        let mut opt = Adam::new(dcfg.learning_rate, &policy.shapes());
        let mut opt_attn = attention.as_ref().map(|a| {
            Adam::new(dcfg.learning_rate, &a.proj.iter().map(|m| (m.rows, m.cols)).collect::<Vec<_>>())
        });
        let mut loss = 0.0;
        for round in 0..dcfg.rounds {
            let beta = 0.5f64.powi(round as i32);
            loss = dagger_round(&mut policy, attention.as_mut(), None, &ctx, &mut aggregate, beta, &dcfg, &path, 1000 + round as u64, &mut opt, opt_attn.as_mut(), None, None).unwrap();
        }
        let ckpt = Checkpoint {
            policy, attention, policy_prompt: None, variant_weights: None,
            state_path: path, task,
            encoder_digest: String::new(), pool_digest: String::new(), config_echo: serde_json::json!({}),
        };
        let eval_on = |domains: &[(u32, DomainSpec)]| {
            let mut succ = 0; let mut total = 0;
            let mut rng = conpe::rng::CounterRng::from_path(99, "probe/eval");
            for (_, d) in domains {
                for ep in 0..6 {
                    let map = &maps[ep % maps.len()];
                    let (start, t) = sample_episode_setup(map, d, &task, &mut rng).unwrap();
                    let (s, _, _, _) = run_policy_episode(&ckpt, &encoder, use_pool.then_some(&pool), map, d, t, start, false).unwrap();
                    succ += usize::from(s); total += 1;
                }
            }
            succ as f64 / total as f64
        };
        let source_s = eval_on(&split.source);
        let seen_s = eval_on(&split.seen_target);
        let unseen_s = eval_on(&split.unseen_target);
        println!("{arm}: loss {loss:.3} source {source_s:.3} seen {seen_s:.3} unseen {unseen_s:.3} ({:.0?})", t1.elapsed());
        unseen_results.push(unseen_s);
    }
    println!("unseen gap (conpe - control): {:+.3}", unseen_results[0] - unseen_results[1]);
}
