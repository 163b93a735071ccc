use fbilm::bilm::pretrain_lm;
use fbilm::harness::checkpoint::{load_checkpoint, save_checkpoint, Model};
use fbilm::harness::config::RunConfig;
use fbilm::harness::grid::crossmodal_model;
use fbilm::synth::{Split, World};
use fbilm::tasks::{evaluate, finetune, top_answers, AnswerVocabulary, PromptOptions, TaskKind};
use fbilm::tokenizer::Vocabulary;
use fbilm::Variant;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.world.n_text_sentences = 400;
    cfg.world.n_pairs = 60;
    cfg.world.n_qa_train = 40;
    cfg.world.n_qa_test = 20;
    cfg.world.min_value_count = 2;
    cfg.bilm.hidden = 16;
    cfg.bilm.n_layers = 1;
    cfg.bilm.n_heads = 2;
    cfg.bilm.ff_dim = 32;
    cfg.pretrain.steps = 10;
    cfg.pretrain.batch_size = 8;
    cfg.crossmodal.steps = 5;
    cfg.crossmodal.batch_size = 8;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 8;
    cfg.answer_vocab_size = 30;
    cfg
}

#[test]
fn library_pipeline_runs_and_round_trips() {
    let cfg = small_config();
    let world = World::new(cfg.world.clone()).unwrap();
    let corpus = world.text_corpus();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let lm = pretrain_lm(&corpus, &vocab, cfg.bilm.clone(), &cfg.pretrain, &cfg.adam, cfg.seed)
        .unwrap()
        .model;

    let pairs = world.pairs();
    let train = world.qa(TaskKind::OpenEnded, Split::Train);
    let test = world.qa(TaskKind::OpenEnded, Split::Test);
    let (mut vlm, losses) = crossmodal_model(&cfg, &lm, &vocab, &pairs, Variant::Frozen).unwrap();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|l| l.is_finite()));

    let answers = AnswerVocabulary::build(&top_answers(&train, cfg.answer_vocab_size), &vlm, &vocab).unwrap();
    let opts = PromptOptions::default();
    let before = evaluate(&test, &vlm, &answers, &vocab, &opts).unwrap();
    assert_eq!(before.total, test.len());

    let frozen_before: Vec<Vec<f32>> = vlm
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    finetune(&mut vlm, &train, &answers, &vocab, &cfg.finetune, &opts, &cfg.adam, cfg.seed).unwrap();
    let frozen_after: Vec<Vec<f32>> = vlm
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    assert_eq!(frozen_before, frozen_after);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vlm.fblm");
    save_checkpoint(&path, &Model::Multimodal(vlm.clone()), &vocab).unwrap();
    let (loaded, loaded_vocab) = load_checkpoint(&path).unwrap();
    let Model::Multimodal(loaded) = loaded else {
        panic!("expected a multimodal checkpoint");
    };
    assert_eq!(loaded_vocab.len(), vocab.len());
    let a = evaluate(&test, &vlm, &answers, &vocab, &opts).unwrap();
    let b = evaluate(&test, &loaded, &answers, &loaded_vocab, &opts).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.correct, b.correct);
}
