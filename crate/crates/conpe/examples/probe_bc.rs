use conpe::encoder::*;
use conpe::harness::*;
use conpe::optim::Adam;
use conpe::policy::*;
use conpe::tensor::Mat;
use conpe::world::*;

fn scale_params(p: &mut EncoderParams, k: f64) {
    let mats: Vec<&mut Mat> = {
        let mut v = vec![&mut p.patch_proj, &mut p.pos_embed];
        for b in &mut p.blocks {
            v.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2]);
        }
        v
    };
    for m in mats {
        for x in &mut m.data {
            *x *= k;
        }
    }
}

fn run(map_size: usize, enc_scale: f64, lr: f64, epochs: usize, steps: usize, rounds: usize) {
    let full = FactorRanges::full();
    let split = make_split(5, &full, SplitCounts { source: 4, seen_target: 4, unseen_target: 6 }, UnseenMode::Tail).unwrap();
    let maps: Vec<GridMap> = [1u64, 2].iter().map(|&s| generate_map(s, map_size).unwrap()).collect();
    let mut encoder = init_encoder(&EncoderConfig { seed: 7, ..Default::default() }).unwrap();
    scale_params(&mut encoder, enc_scale);
    let source: Vec<DomainSpec> = split.source.iter().map(|(_, s)| s.clone()).collect();

    let mut policy = PolicyParams::init(64 + 4, 11);
    let path = StatePath::Control;
    let ctx = DaggerContext { encoder: &encoder, pool: None, maps: &maps, domains: &source, task: Task::ObjectGoal { color: 0 }, embed: None };
    let dcfg = DaggerConfig { rounds, steps_per_round: steps, bc_epochs: epochs, batch_size: 64, learning_rate: lr, seed: 0 };
    let mut aggregate = BcBatch::default();
    let mut opt = Adam::new(lr, &policy.shapes());
    let t0 = std::time::Instant::now();
    let mut last_loss = 0.0;
    for round in 0..rounds {
        let beta = 0.5f64.powi(round as i32);
        last_loss = dagger_round(&mut policy, None, None, &ctx, &mut aggregate, beta, &dcfg, &path, 1000 + round as u64, &mut opt, None, None, None).unwrap();
    }
    let ckpt = Checkpoint {
        policy: policy.clone(), attention: None, policy_prompt: None, variant_weights: None,
        state_path: path, task: Task::ObjectGoal { color: 0 },
        encoder_digest: String::new(), pool_digest: String::new(), config_echo: serde_json::json!({}),
    };
    let eval_on = |domains: &[(u32, DomainSpec)], tag: &str| {
        let mut succ = 0; let mut total = 0;
        let mut rng = conpe::rng::CounterRng::from_path(99, "probe/eval");
        for (_, d) in domains {
            for ep in 0..6 {
                let map = &maps[ep % maps.len()];
                let (start, task) = sample_episode_setup(map, d, &Task::ObjectGoal { color: 0 }, &mut rng).unwrap();
                let (s, _, _, _) = run_policy_episode(&ckpt, &encoder, None, map, d, task, start, false).unwrap();
                succ += usize::from(s); total += 1;
            }
        }
        println!("    {tag}: {succ}/{total}");
    };
    println!("map {map_size} scale {enc_scale} lr {lr} epochs {epochs} steps {steps} rounds {rounds}: loss {last_loss:.3} ({:.0?})", t0.elapsed());
    eval_on(&split.source, "source");
    eval_on(&split.unseen_target, "unseen");
}

fn main() {
    run(7, 16.0, 3e-3, 60, 600, 4);
    run(7, 32.0, 3e-3, 60, 600, 4);
    run(7, 50.0, 3e-3, 60, 600, 4);
}
