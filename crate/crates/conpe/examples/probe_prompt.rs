use conpe::contrast::*;
use conpe::encoder::*;
use conpe::harness::*;
use conpe::optim::Adam;
use conpe::pipeline::*;
use conpe::prompt::*;
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

fn main() {
    let full = FactorRanges::full();
    let split = make_split(5, &full, SplitCounts { source: 2, seen_target: 2, unseen_target: 2 }, UnseenMode::Tail).unwrap();
    let maps: Vec<GridMap> = [1u64, 2, 3].iter().map(|&s| generate_map(s, 7).unwrap()).collect();
    let mut encoder = init_encoder(&EncoderConfig { seed: 7, ..Default::default() }).unwrap();
    scale_params(&mut encoder, 16.0);
    let task = Task::ObjectGoal { color: 0 };

    for (factor, m, steps, lr) in [
        (FactorId::HueShift, 12usize, 160usize, 2e-3),
        (FactorId::Saturation, 12, 160, 2e-3),
        (FactorId::Brightness, 12, 160, 2e-3),
    ] {
        let domains = factor_variation_domains(factor, &split.seen_ranges, 4, 11 ^ u64::from(factor.code())).unwrap();
        let ds = collect_aligned_episodes(&maps, &domains, &task, 3, 13, false, 6).unwrap();
        let stream = timestep_pairs(&ds, 3).unwrap();
        let ho_domains = factor_variation_domains(factor, &split.seen_ranges, 2, 311 ^ u64::from(factor.code())).unwrap();
        let ho = collect_aligned_episodes(&maps, &ho_domains, &task, 2, 313, false, 6).unwrap();
        let ho_stream = timestep_pairs(&ho, 3).unwrap();
        for seed in [23u64, 97, 555] {
            let t0 = std::time::Instant::now();
            let mut prompt = init_prompt(factor, 8, 64, seed);
            let mut opt = Adam::new(lr, &[(8, 64)]);
            let mut rng = conpe::rng::CounterRng::from_path(seed ^ 29, "probe/batches");
            let tail_start = steps / 2;
            let mut avg = conpe::tensor::Mat::zeros(8, 64);
            let mut n_avg = 0.0;
            for step in 0..steps {
                let batch = build_batch(&stream, m, rng.next_u64()).unwrap();
                let (_, grad) = contrastive_loss(&prompt.tokens, &batch, &encoder, 1.0, SimilarityMode::Literal).unwrap();
                opt.update(&mut [&mut prompt.tokens], &[grad]);
                if step >= tail_start {
                    avg.add_assign(&prompt.tokens);
                    n_avg += 1.0;
                }
            }
            prompt.tokens = avg.scale(1.0 / n_avg);
            quantize_to_f32(&mut prompt);
            let gain = prompt_invariance_gain(&encoder, &prompt, &ho_stream, &ho, 64, 43).unwrap();
            println!("{:<12} m {m} steps {steps} lr {lr} seed {seed}: gain {gain:+.4} ({:.0?})", factor.name(), t0.elapsed());
        }
    }
}
