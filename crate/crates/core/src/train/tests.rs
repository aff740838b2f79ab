use super::*;
use crate::codec::{encode_text, parse_markup, Vocab};
use crate::decoder::DecoderConfig;
use crate::sampler::SamplerConfig;
use crate::synth::{generate, Family, GeneratorConfig};
use crate::vision::EncoderConfig;

const BINS: u32 = 32;

fn mini_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: 32,
            patch_size: 2,
            window_size: 2,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [4, 8, 16, 32],
            num_heads: [1, 1, 2, 2],
            ffn_mult: 2,
        },
        sampler: SamplerConfig { queries_per_stage: 2, depth: 1, decoder_dim: 16, heads: 2, ffn_mult: 2, shared_resampler: false },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            hidden: 16,
            ffn_mult: 2,
            max_seq: 256,
            vocab_size: Vocab::new(BINS).unwrap().size(),
        },
        bins: BINS,
    }
}

fn items(families: &[(Family, usize)]) -> Vec<TrainItem> {
    let cfg = GeneratorConfig { image_size: 64, bins: BINS, word_count: (1, 2), ..GeneratorConfig::default() };
    let vocab = Vocab::new(BINS).unwrap();
    let mut out = Vec::new();
    for &(f, n) in families {
        for i in 0..n {
            let s = generate(f, i as u64, &cfg).unwrap();
            out.push(TrainItem {
                id: s.id.clone(),
                task: s.task,
                image: s.image.clone(),
                prompt_ids: encode_text(&s.prompt),
                response_ids: parse_markup(&s.target, &vocab).unwrap(),
            });
        }
    }
    out
}

fn mini_stage(stage: u8, steps: usize) -> StageConfig {
    let mut s = StageConfig::desk(stage, 0.1).unwrap();
    s.steps = steps;
    s.batch_size = 2;
    s.log_every = 1;
    s.resolution = if stage == 1 {
        ResolutionSchedule { small: 16, large: 32, switch_fraction: 0.5 }
    } else {
        ResolutionSchedule::fixed(32)
    };
    s
}

#[test]
fn stage_presets() {
    let s1 = StageConfig::desk(1, 0.1).unwrap();
    assert_eq!(s1.tasks, vec![PromptTask::Spotting]);
    let s2 = StageConfig::desk(2, 0.1).unwrap();
    assert!(s2.tasks.len() >= 8 && !s2.tasks.contains(&PromptTask::PureText));
    let s3 = StageConfig::desk(3, 0.1).unwrap();
    assert_eq!(s3.steps, 200);
    assert_eq!(StageConfig { stage: 3, steps: s3.steps, ..s2.clone() }, s3);
    assert_eq!(StageConfig::full_scale(3).unwrap().steps, 2000);
    assert_eq!(finetune_steps(1.0), 2000);
    assert!(StageConfig::desk(4, 0.1).is_err());
    let bad = StageConfig { tasks: vec![PromptTask::Spotting, PromptTask::Kie], ..s1.clone() };
    assert!(bad.validate().is_err());
    assert!(StageConfig { pure_text_ratio: 0.1, ..s1 }.validate().is_err());
}

#[test]
fn resolution_curriculum() {
    let desk = StageConfig::desk(1, 0.1).unwrap();
    assert_eq!(resolution_schedule(980, &desk), 32);
    assert_eq!(resolution_schedule(1020, &desk), 64);
    let full = StageConfig::full_scale(1).unwrap();
    assert_eq!(resolution_schedule(0, &full), 960);
    assert_eq!(resolution_schedule(full.steps - 1, &full), 1600);
    let s2 = StageConfig::full_scale(2).unwrap();
    assert_eq!(resolution_schedule(0, &s2), 1600);
}

#[test]
fn learning_rate_warmup() {
    let s = StageConfig { steps: 100, lr: 1e-3, warmup_fraction: 0.05, ..StageConfig::desk(1, 0.1).unwrap() };
    assert!((s.lr_at(0) - 2e-4).abs() < 1e-12);
    assert_eq!(s.lr_at(4), 1e-3);
    assert_eq!(s.lr_at(99), 1e-3);
}

fn pure_fraction(ratio: f64, seed: u64, draws: usize) -> f64 {
    let batches = mix_batches(std::iter::repeat(false), std::iter::repeat(true), ratio, seed, 10);
    let slots: Vec<bool> = batches.take(draws / 10).flatten().collect();
    slots.iter().filter(|&&p| p).count() as f64 / slots.len() as f64
}

#[test]
fn mixing_ratio() {
    assert_eq!(pure_fraction(0.0, 3, 10_000), 0.0);
    assert!((pure_fraction(0.25, 3, 10_000) - 0.25).abs() <= 0.02);
    let a: Vec<Vec<bool>> = mix_batches(std::iter::repeat(false), std::iter::repeat(true), 0.3, 9, 4).take(20).collect();
    let b: Vec<Vec<bool>> = mix_batches(std::iter::repeat(false), std::iter::repeat(true), 0.3, 9, 4).take(20).collect();
    assert_eq!(a, b);
}

#[test]
fn epoch_cycler_visits_everything_each_pass() {
    use rand::SeedableRng;
    let mut c = EpochCycler::new(vec![3, 5, 7], rand_chacha::ChaCha8Rng::seed_from_u64(0));
    for _ in 0..4 {
        let mut pass: Vec<usize> = (0..3).map(|_| c.next().unwrap()).collect();
        pass.sort_unstable();
        assert_eq!(pass, vec![3, 5, 7]);
    }
    assert_eq!(EpochCycler::new(vec![], rand_chacha::ChaCha8Rng::seed_from_u64(0)).next(), None);
}

#[test]
fn mixture_validation() {
    assert!(MixtureSpec::uniform().validate().is_ok());
    let mut m = MixtureSpec::uniform();
    m.weights.values_mut().for_each(|w| *w = 0.0);
    assert!(m.validate().is_err());
    m.weights.insert(PromptTask::Kie, -1.0);
    assert!(m.validate().is_err());
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let mut t = Trainer::new(mini_config(), 1).unwrap();
    let before = t.model.store.clone();
    let out = run_stage(&mut t, &mini_stage(1, 0), &MixtureSpec::uniform(), &items(&[(Family::Spotting, 2)])).unwrap();
    assert_eq!(out.final_loss, None);
    assert_eq!(t.model.store.tensors(), before.tensors());
    assert_eq!(t.lineage.len(), 1);
}

#[test]
fn stage_runs_are_deterministic_and_touch_every_parameter() {
    let data = items(&[(Family::Spotting, 4)]);
    let run = || {
        let mut t = Trainer::new(mini_config(), 5).unwrap();
        let out = run_stage(&mut t, &mini_stage(1, 4), &MixtureSpec::uniform(), &data).unwrap();
        (t, out)
    };
    let (ta, a) = run();
    let (tb, b) = run();
    assert_eq!(a.final_loss, b.final_loss);
    assert_eq!(ta.model.store.tensors(), tb.model.store.tensors());
    assert!(ta.untouched(&a).is_empty(), "{:?}", ta.untouched(&a));
    let sizes: Vec<usize> = a.log.iter().map(|r| r.image_size).collect();
    assert_eq!(sizes, vec![16, 16, 32, 32]);
    assert_eq!(ta.step, 4);
}

#[test]
fn multitask_stage_consumes_every_family() {
    let fams: Vec<(Family, usize)> = Family::ALL.iter().map(|&f| (f, 2)).collect();
    let data = items(&fams);
    let mut t = Trainer::new(mini_config(), 2).unwrap();
    let mut stage = mini_stage(2, 3);
    stage.pure_text_ratio = 0.3;
    stage.batch_size = 6;
    let out = run_stage(&mut t, &stage, &MixtureSpec::uniform(), &data).unwrap();
    assert!(out.final_loss.unwrap().is_finite());
    assert!(t.untouched(&out).is_empty());
}

#[test]
fn stage_one_ignores_other_tasks() {
    let data = items(&[(Family::Kie, 3)]);
    let mut t = Trainer::new(mini_config(), 2).unwrap();
    assert!(matches!(
        run_stage(&mut t, &mini_stage(1, 1), &MixtureSpec::uniform(), &data),
        Err(Error::DegenerateBatch(_))
    ));
}

#[test]
fn overflowing_samples_are_skipped() {
    let data = items(&[(Family::Spotting, 6)]);
    let lens: Vec<usize> = data.iter().map(|it| it.prompt_ids.len() + it.response_ids.len() + 1 + 4).collect();
    let limit = *lens.iter().min().unwrap();
    assert!(lens.iter().any(|&l| l > limit));
    let mut stage = mini_stage(1, 3);
    stage.max_seq = limit;
    let mut t = Trainer::new(mini_config(), 2).unwrap();
    let out = run_stage(&mut t, &stage, &MixtureSpec::uniform(), &data).unwrap();
    assert!(out.overflow_skips > 0);
    stage.max_seq = limit - 1;
    assert!(matches!(
        run_stage(&mut t, &stage, &MixtureSpec::uniform(), &data),
        Err(Error::SequenceLength { .. })
    ));
}

#[test]
fn non_finite_loss_aborts() {
    let mut t = Trainer::new(mini_config(), 2).unwrap();
    let id = t.model.decoder.lm_head.w;
    t.model.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = run_stage(&mut t, &mini_stage(1, 2), &MixtureSpec::uniform(), &items(&[(Family::Spotting, 2)]));
    assert!(matches!(err, Err(Error::NonFinite { stage: 1, step: 0 })));
}

fn probe_logits(t: &Trainer, item: &TrainItem) -> Vec<f32> {
    t.model.example_logits(&item.example(32).unwrap()).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = items(&[(Family::Spotting, 2)]);
    let mut t = Trainer::new(mini_config(), 3).unwrap();
    run_stage(&mut t, &mini_stage(1, 2), &MixtureSpec::uniform(), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    save_checkpoint(&t, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(probe_logits(&t, &data[0]), probe_logits(&back, &data[0]));
    assert_eq!(back.adam, t.adam);
    assert_eq!((back.step, back.seed, &back.lineage), (t.step, t.seed, &t.lineage));
    assert_eq!(checkpoint_to_bytes(&back), checkpoint_to_bytes(&t));

    let info = read_checkpoint_info(&path).unwrap();
    assert_eq!(info.version, CHECKPOINT_VERSION);
    assert_eq!(info.tensors.len(), 3 * t.model.store.len());
    assert!(info.tensors.iter().any(|x| x.name.starts_with("adam.v.")));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = Trainer::new(mini_config(), 3).unwrap();
    let bytes = checkpoint_to_bytes(&t);
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x40;
    assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Integrity(_))));

    let mut versioned = bytes[..bytes.len() - 4].to_vec();
    versioned[5..9].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let crc = crc32fast::hash(&versioned);
    versioned.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(checkpoint_from_bytes(&versioned), Err(Error::Compatibility(_))));
}

#[test]
fn lineage_and_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    let mut t = Trainer::new(mini_config(), 4).unwrap();
    let fams: Vec<(Family, usize)> = Family::ALL.iter().map(|&f| (f, 1)).collect();
    let data = items(&fams);
    run_stage(&mut t, &mini_stage(1, 1), &MixtureSpec::uniform(), &data).unwrap();
    save_checkpoint(&t, &path).unwrap();
    let mut s2 = load_checkpoint_for(&path, &mini_config()).unwrap();
    run_stage(&mut s2, &mini_stage(2, 1), &MixtureSpec::uniform(), &data).unwrap();
    let stages: Vec<u8> = s2.lineage.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![1, 2]);

    let mut other = mini_config();
    other.bins = 16;
    other.decoder.vocab_size = Vocab::new(16).unwrap().size();
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Compatibility(_))));
}
