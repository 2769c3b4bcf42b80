use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spt_core::corpus::celebrity::{direction, QuestionFormat, TrainFormat};
use spt_core::corpus::{self, DatasetSpec, Direction};
use spt_core::eval::{evaluate, evaluate_checkpoint, MetricsTable};
use spt_core::experiment;
use spt_core::model::{save_checkpoint, CheckpointHeader, ModelParams};
use spt_core::tokenizer::Vocab;
use spt_core::train::{Strategy, TrainConfig};
use spt_core::Error;

fn small_celebrity(format: TrainFormat) -> DatasetSpec {
    DatasetSpec::Celebrity { facts: 5, scaffold_facts: 30, questions_per_scaffold: 8, train_format: format, fewshot: false }
}

#[test]
fn memorizer_answers_same_direction() {
    // Five queried facts; the scaffold teaches the question formats.
    let spec = DatasetSpec::Celebrity { facts: 5, scaffold_facts: 150, questions_per_scaffold: 3, train_format: TrainFormat::D1, fewshot: false };
    let mut cfg = TrainConfig::new(spec, Strategy::ForwardOnly);
    cfg.epochs = 60;
    cfg.lr = 2e-3;
    cfg.stop_loss = Some(0.05);
    cfg.model.d_model = 64;
    let tmp = tempfile::tempdir().unwrap();
    let r = experiment::run(&cfg, tmp.path(), None).unwrap();
    assert_eq!(r.summary.same, Some(1.0), "{}", r.table.to_markdown());
    assert!(r.summary.reverse.unwrap() <= 0.2);
}

#[test]
fn untrained_model_scores_nothing() {
    let ds = corpus::build(&small_celebrity(TrainFormat::D2), 3).unwrap();
    let vocab = Vocab::build(ds.train.iter().map(|t| t.text.as_str()));
    let p = ModelParams::<f32>::init(spt_core::model::ModelConfig { vocab: vocab.len(), d_model: 32, heads: 2, layers: 2, context: 128 }, 1, 0.02)
        .unwrap();
    let (_, table) = evaluate(&p, &vocab, &ds.eval, 24).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(table.rows.iter().all(|r| r.value == 0.0));
}

#[test]
fn scoring_ignores_item_order_and_buckets_by_direction() {
    let ds = corpus::build(&small_celebrity(TrainFormat::D3), 4).unwrap();
    let vocab = Vocab::build(ds.train.iter().map(|t| t.text.as_str()));
    let p = ModelParams::<f32>::init(spt_core::model::ModelConfig { vocab: vocab.len(), d_model: 16, heads: 2, layers: 1, context: 128 }, 2, 0.5)
        .unwrap();
    let (preds, table) = evaluate(&p, &vocab, &ds.eval, 6).unwrap();
    let mut shuffled = preds.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(MetricsTable::from_predictions(&shuffled), table);
    for q in QuestionFormat::ALL {
        let row = table.cell(Some(TrainFormat::D3), &q.to_string()).unwrap();
        assert_eq!(row.direction, direction(TrainFormat::D3, q));
        assert_eq!(row.n, 5);
    }
    let reverse = table.rows.iter().filter(|r| r.direction == Direction::Reverse).count();
    assert_eq!(reverse, 4);
}

#[test]
fn checkpoint_vocab_must_match() {
    let ds = corpus::build(&small_celebrity(TrainFormat::D1), 5).unwrap();
    let vocab = Vocab::build(ds.train.iter().map(|t| t.text.as_str()));
    let other = Vocab::build(["something else entirely"]);
    let p = ModelParams::<f32>::init(spt_core::model::ModelConfig { vocab: vocab.len(), d_model: 16, heads: 2, layers: 1, context: 128 }, 2, 0.02)
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &CheckpointHeader { model: p.config, vocab_hash: vocab.hash(), seed: 0, epoch: 0 }, &p).unwrap();
    assert!(evaluate_checkpoint(&path, &vocab, &ds.eval, 4).is_ok());
    assert!(matches!(evaluate_checkpoint(&path, &other, &ds.eval, 4), Err(Error::VocabMismatch { .. })));
}

#[test]
fn written_datasets_read_back() {
    for (spec, seed) in [
        (small_celebrity(TrainFormat::D4), 1),
        (DatasetSpec::Qa { two_direction: 12, a2q_only: 3 }, 2),
        (DatasetSpec::PersonDesc { persons: 6, train_templates: 4, test_templates: 2 }, 3),
    ] {
        let mut ds = corpus::build(&spec, seed).unwrap();
        experiment::segment_dataset(&mut ds, spt_core::segment::Backend::Heuristic, None).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (tr, te) = (tmp.path().join("train.jsonl"), tmp.path().join("test.jsonl"));
        corpus::write_jsonl(&ds, &tr, &te).unwrap();
        assert_eq!(corpus::read_train(&tr).unwrap(), ds.train);
        assert_eq!(corpus::read_eval(&te).unwrap(), ds.eval);
    }
}

#[test]
fn evaluation_prompts_use_training_vocabulary() {
    for (spec, seed) in [
        (small_celebrity(TrainFormat::D2), 1),
        (DatasetSpec::Qa { two_direction: 20, a2q_only: 5 }, 2),
        (DatasetSpec::PersonDesc { persons: 8, train_templates: 8, test_templates: 3 }, 3),
    ] {
        let ds = corpus::build(&spec, seed).unwrap();
        let vocab = Vocab::build(ds.train.iter().map(|t| t.text.as_str()));
        for item in &ds.eval {
            let ids = vocab.encode_prompt(&item.prompt);
            assert!(!ids.contains(&spt_core::tokenizer::UNK), "{spec:?}: {}", item.prompt);
        }
    }
}
