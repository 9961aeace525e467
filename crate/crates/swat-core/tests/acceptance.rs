//! Release gates: every test checks one acceptance criterion at its pinned
//! tolerance and prints a single `criterion NN [PASS|FAIL]` line (visible
//! with `cargo test --test acceptance -- --nocapture`).
//!
//! The training-protocol criteria (05-10) run the committed standard config
//! `configs/synthetic.toml`, so the shipped recipe is exactly the one these
//! gates certify.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use swat_core::augment::cutmix;
use swat_core::config::{load_config, ExperimentConfig};
use swat_core::corpus::{CaptionRecord, CorpusIndex};
use swat_core::data::{
    mix_pools, split_common_rare, ExampleInput, ImageTensor, LabeledExample, Source,
};
use swat_core::embed::{cosine, HashEmbedder, TextImageEmbedder};
use swat_core::eval::{evaluate, mean_std};
use swat_core::experiment::{
    prepare_seed, run_experiment, run_probe_gap, sweep, Method, SweepAxis, TEXT_EMBED_SEED,
};
use swat_core::model::{
    argmax_lowest, init_head_from_text, CosineHead, Encoder, MlpEncoder, Model, StageTag,
};
use swat_core::retrieval::{rank, select_top_k, string_match, RankMethod};
use swat_core::rng;
use swat_core::train::soft_cross_entropy;
use swat_core::train::{fsft, stage1_finetune, stage2_retrain_classifier, train_linear_probe};
use swat_core::vocab::{ConceptEntry, ConceptVocabulary};

/// The committed standard benchmark config; criteria 05-10 certify it.
fn standard_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    load_config(&path).expect("committed standard config loads")
}

/// Print the one-line verdict and return `ok` for the caller to assert.
fn verdict(n: u32, name: &str, ok: bool, detail: &str, t0: Instant) -> bool {
    println!(
        "criterion {:02} [{}] {}: {} ({:.1}s)",
        n,
        if ok { "PASS" } else { "FAIL" },
        name,
        detail,
        t0.elapsed().as_secs_f64()
    );
    ok
}

// ---------------------------------------------------------------------------
// Criterion 1: retrieval equals a brute-force reference on a 10k corpus.
// ---------------------------------------------------------------------------

const C1_CONCEPTS: usize = 20;
const C1_RECORDS: usize = 10_000;
const C1_TOP_K: usize = 30;

fn c1_name(i: usize) -> String {
    format!("beast{:02}", i)
}

/// Synonyms: the bare name, a two-word variant, and a derived single token
/// that *contains* the name without a word boundary (so matching it must not
/// double-count the bare name).
fn c1_synonyms(i: usize) -> [String; 3] {
    let n = c1_name(i);
    [n.clone(), format!("great {}", n), format!("{}let", n)]
}

fn c1_vocab() -> ConceptVocabulary {
    let pairs = (0..C1_CONCEPTS)
        .map(|i| {
            (
                c1_name(i),
                ConceptEntry {
                    synonyms: c1_synonyms(i).to_vec(),
                    prompts: vec![
                        format!("a photo of a {}", c1_name(i)),
                        format!("an image of the {}", c1_name(i)),
                    ],
                },
            )
        })
        .collect();
    ConceptVocabulary::new(pairs).expect("valid planted vocabulary")
}

fn c1_case_variant(text: &str, variant: u64) -> String {
    match variant % 3 {
        0 => text.to_string(),
        1 => text.to_uppercase(),
        _ => {
            let mut chars = text.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        }
    }
}

/// Generate the corpus and the ground-truth match sets in one pass. Captions
/// are unique (every one carries its record number), filler words never
/// collide with the invented concept tokens, and a slice of the corpus plants
/// boundary traps: concept names glued to other letters must not match.
fn c1_corpus_and_truth() -> (Vec<CaptionRecord>, Vec<BTreeSet<String>>) {
    let mut records = Vec::with_capacity(C1_RECORDS);
    let mut truth: Vec<BTreeSet<String>> = vec![BTreeSet::new(); C1_CONCEPTS];
    let mut r = rng::seeded(0xACC1, "corpus", 0);
    for pos in 0..C1_RECORDS {
        let id = format!("r{:05}", pos);
        let roll: u64 = r.random_range(0..100);
        let concept: usize = r.random_range(0..C1_CONCEPTS);
        let synonym: usize = r.random_range(0..3);
        let casing: u64 = r.random_range(0..3);
        let syn = c1_case_variant(&c1_synonyms(concept)[synonym], casing);
        let caption = if roll < 30 {
            format!("plain scenery without anything notable frame {}", pos)
        } else if roll < 70 {
            truth[concept].insert(id.clone());
            match roll % 3 {
                0 => format!("one {} resting near the water line frame {}", syn, pos),
                1 => format!("blurry capture of the {} at dawn frame {}", syn, pos),
                _ => format!("{} spotted from the ridge frame {}", syn, pos),
            }
        } else if roll < 80 {
            let other = (concept + 1 + r.random_range(0..C1_CONCEPTS - 1)) % C1_CONCEPTS;
            let other_syn =
                c1_case_variant(&c1_synonyms(other)[r.random_range(0..3)], r.random_range(0..3));
            truth[concept].insert(id.clone());
            truth[other].insert(id.clone());
            format!("both {} and {} together at dusk frame {}", syn, other_syn, pos)
        } else if roll < 90 {
            // Boundary traps only: glued tokens must not match.
            match roll % 2 {
                0 => format!("many {}s gathered by the fence frame {}", c1_name(concept), pos),
                _ => format!("the mega{} statue frame {}", c1_name(concept), pos),
            }
        } else {
            // A real mention next to a glued decoy of another concept.
            let other = (concept + 1 + r.random_range(0..C1_CONCEPTS - 1)) % C1_CONCEPTS;
            truth[concept].insert(id.clone());
            format!("a {} near the {}s herd frame {}", syn, c1_name(other), pos)
        };
        records.push(CaptionRecord { id, caption, image_path: None, features: None });
    }
    (records, truth)
}

#[test]
fn c01_retrieval_equals_brute_force_reference() {
    let t0 = Instant::now();
    let vocab = c1_vocab();
    let (records, truth) = c1_corpus_and_truth();
    let captions: Vec<String> = records.iter().map(|r| r.caption.clone()).collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let index = CorpusIndex::build(records).unwrap();
    let embedder = HashEmbedder::new(32, TEXT_EMBED_SEED);

    let mut problems: Vec<String> = Vec::new();

    // Matching: set equality per concept against the planted truth.
    let matches = string_match(&index, &vocab);
    for ci in 0..C1_CONCEPTS {
        let got: BTreeSet<String> = matches.per_concept[ci]
            .iter()
            .map(|h| ids[h.record_pos].clone())
            .collect();
        if got != truth[ci] {
            problems.push(format!(
                "concept {} match set: {} records vs {} planted (spurious: {:?}, missed: {:?})",
                ci,
                got.len(),
                truth[ci].len(),
                got.difference(&truth[ci]).take(3).collect::<Vec<_>>(),
                truth[ci].difference(&got).take(3).collect::<Vec<_>>(),
            ));
        }
    }

    // Ranking: brute-force scores + an independent sort, sequence equality.
    let ranked = rank(
        &index,
        &vocab,
        &matches,
        RankMethod::T2T,
        &embedder,
        &vec![Vec::new(); C1_CONCEPTS],
        0,
    )
    .unwrap();
    let mut reference: Vec<Vec<(String, f64)>> = Vec::with_capacity(C1_CONCEPTS);
    for ci in 0..C1_CONCEPTS {
        // Raw (unnormalized) mean of the prompt embeddings; cosine makes the
        // normalization the implementation applies irrelevant.
        let prompts = &vocab.iter().nth(ci).unwrap().2.prompts;
        let embs: Vec<Vec<f64>> =
            prompts.iter().map(|p| embedder.embed_text(p).unwrap()).collect();
        let mean: Vec<f64> = (0..32)
            .map(|j| embs.iter().map(|e| e[j]).sum::<f64>() / embs.len() as f64)
            .collect();
        let mut rows: Vec<(String, f64)> = truth[ci]
            .iter()
            .map(|id| {
                let pos = ids.iter().position(|x| x == id).unwrap();
                let cap_emb = embedder.embed_text(&captions[pos].to_lowercase()).unwrap();
                (id.clone(), cosine(&mean, &cap_emb))
            })
            .collect();
        rows.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        reference.push(rows);
    }
    for ci in 0..C1_CONCEPTS {
        let got: Vec<&str> =
            ranked.per_concept[ci].iter().map(|c| c.record_id.as_str()).collect();
        let want: Vec<&str> = reference[ci].iter().map(|(id, _)| id.as_str()).collect();
        if got != want {
            problems.push(format!("concept {} ranking order differs", ci));
            continue;
        }
        for (cand, (_, score)) in ranked.per_concept[ci].iter().zip(&reference[ci]) {
            if (cand.score - score).abs() > 1e-9 {
                problems.push(format!("concept {} score mismatch {}", ci, cand.record_id));
                break;
            }
        }
        if ranked.per_concept[ci].iter().enumerate().any(|(i, c)| c.rank != i + 1) {
            problems.push(format!("concept {} ranks not 1-based consecutive", ci));
        }
    }

    // Top-k: the first k of the reference order.
    let pool = select_top_k(&ranked, C1_TOP_K).unwrap();
    for ci in 0..C1_CONCEPTS {
        let got: Vec<&str> = pool.per_concept[ci].iter().map(|c| c.record_id.as_str()).collect();
        let want: Vec<&str> = reference[ci]
            .iter()
            .take(C1_TOP_K)
            .map(|(id, _)| id.as_str())
            .collect();
        if got != want {
            problems.push(format!("concept {} top-{} selection differs", ci, C1_TOP_K));
        }
    }

    let total: usize = truth.iter().map(BTreeSet::len).sum();
    let ok = problems.is_empty() && t0.elapsed().as_secs_f64() < 10.0;
    let detail = if problems.is_empty() {
        format!("{} records, {} planted matches, top-{} identical", C1_RECORDS, total, C1_TOP_K)
    } else {
        problems.join("; ")
    };
    assert!(
        verdict(1, "retrieval equals brute-force reference", ok, &detail, t0),
        "{}",
        detail
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: CutMix label exactness over 1,000 draws on 32x32 inputs.
// ---------------------------------------------------------------------------

#[test]
fn c02_cutmix_labels_are_area_exact() {
    let t0 = Instant::now();
    let n = 32;
    let (h, w) = (32usize, 32usize);
    let pixels = (h * w) as f64;
    // Every batch member is a constant image with a unique value and its own
    // class, so pasted pixels identify the partner exactly.
    let batch: Vec<LabeledExample> = (0..n)
        .map(|i| LabeledExample {
            id: format!("img{}", i),
            input: ExampleInput::Image(
                ImageTensor::new(1, h, w, vec![(i + 1) as f64; h * w]).unwrap(),
            ),
            label: i,
            source: if i % 2 == 0 { Source::FewShot } else { Source::Retrieved },
        })
        .collect();
    let refs: Vec<&LabeledExample> = batch.iter().collect();

    let mut draws = 0usize;
    let mut lam_mismatches = 0usize;
    let mut max_label_err = 0.0f64;
    let mut max_sum_err = 0.0f64;
    let mut foreign_pixels = 0usize;
    let mut round = 0u64;
    while draws < 1000 {
        let mut r = rng::seeded(0xACC2, "cutmix-draws", round);
        round += 1;
        let mixed = cutmix(&refs, n, 1.0, 1.0, &mut r).unwrap();
        for i in 0..n {
            let sum: f64 = mixed.labels[i].iter().sum();
            max_sum_err = max_sum_err.max((sum - 1.0).abs());
            if !mixed.applied[i] || mixed.pair_index[i] == i {
                continue;
            }
            let j = mixed.pair_index[i];
            let ExampleInput::Image(t) = &mixed.inputs[i] else {
                panic!("image in, image out");
            };
            let (own, partner) = ((i + 1) as f64, (j + 1) as f64);
            let pasted = t.data.iter().filter(|&&v| v == partner).count();
            foreign_pixels +=
                t.data.iter().filter(|&&v| v != partner && v != own).count();
            // Independent mixing coefficient from pixel counting.
            let lam = 1.0 - pasted as f64 / pixels;
            if mixed.lam[i] != lam {
                lam_mismatches += 1;
            }
            for (c, &got) in mixed.labels[i].iter().enumerate() {
                let want = if c == i { lam } else if c == j { 1.0 - lam } else { 0.0 };
                max_label_err = max_label_err.max((got - want).abs());
            }
            draws += 1;
        }
    }

    let ok = lam_mismatches == 0
        && max_label_err <= 1e-6
        && max_sum_err <= 1e-6
        && foreign_pixels == 0;
    let detail = format!(
        "{} draws, lam exact in {}, max label err {:.1e}, max row-sum err {:.1e}",
        draws,
        draws - lam_mismatches,
        max_label_err,
        max_sum_err
    );
    assert!(verdict(2, "cutmix labels are area-exact", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 3: text-initialized head reproduces nearest-prompt argmax.
// ---------------------------------------------------------------------------

#[test]
fn c03_zeroshot_head_matches_nearest_prompt_argmax() {
    let t0 = Instant::now();
    let (dim, classes, in_dim) = (24usize, 12usize, 10usize);
    let pairs = (0..classes)
        .map(|i| {
            (
                format!("thing{:02}", i),
                ConceptEntry {
                    synonyms: vec![format!("thing{:02}", i)],
                    prompts: vec![
                        format!("a photo of thing{:02}", i),
                        format!("a close-up of thing{:02}", i),
                        format!("thing{:02} in the wild", i),
                    ],
                },
            )
        })
        .collect();
    let vocab = ConceptVocabulary::new(pairs).unwrap();
    let embedder = HashEmbedder::new(dim, 0xACC3);
    let head = init_head_from_text(&vocab, &embedder, 0.01).unwrap();
    let mut r = rng::seeded(0xACC3, "encoder", 0);
    let encoder = Encoder::Mlp(MlpEncoder::new(in_dim, 16, dim, &mut r));
    let model = Model::new(encoder, head, StageTag::Pretrained).unwrap();

    // Raw mean prompt embedding per concept, computed from the embedder alone.
    let means: Vec<Vec<f64>> = vocab
        .iter()
        .map(|(_, _, entry)| {
            let embs: Vec<Vec<f64>> =
                entry.prompts.iter().map(|p| embedder.embed_text(p).unwrap()).collect();
            (0..dim).map(|j| embs.iter().map(|e| e[j]).sum::<f64>() / embs.len() as f64).collect()
        })
        .collect();

    let mut data = rng::seeded(0xACC3, "inputs", 1);
    let inputs: Vec<ExampleInput> = (0..100)
        .map(|_| {
            ExampleInput::Features((0..in_dim).map(|_| data.random::<f64>() * 2.0 - 1.0).collect())
        })
        .collect();
    let input_refs: Vec<&ExampleInput> = inputs.iter().collect();

    let predictions = model.predict(&input_refs).unwrap();
    let features = model.encoder.forward(&input_refs).unwrap();
    let mut agree = 0usize;
    for (row, &pred) in features.outer_iter().zip(&predictions) {
        let feat = row.to_vec();
        let scores: Vec<f64> = means.iter().map(|m| cosine(&feat, m)).collect();
        if argmax_lowest(&scores) == pred {
            agree += 1;
        }
    }

    let ok = agree == 100;
    let detail = format!("{}/100 argmax agreements", agree);
    assert!(
        verdict(3, "zero-shot head equals nearest-prompt argmax", ok, &detail, t0),
        "{}",
        detail
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

fn loss_of(model: &Model, inputs: &[&ExampleInput], labels: &[Vec<f64>]) -> f64 {
    let features = model.encoder.forward(inputs).unwrap();
    let (logits, _) = model.head.logits(&features).unwrap();
    soft_cross_entropy(&logits, labels).unwrap().0
}

fn set_flat(model: &mut Model, idx: usize, value: f64) {
    let mut groups = model.param_groups();
    let mut i = idx;
    for t in groups.encoder.iter_mut() {
        if i < t.len() {
            t[i] = value;
            return;
        }
        i -= t.len();
    }
    if i < groups.head_w.len() {
        groups.head_w[i] = value;
        return;
    }
    i -= groups.head_w.len();
    groups.log_tau[i] = value;
}

/// Analytic gradient of the soft cross-entropy loss for every parameter, in
/// the same canonical order as `Model::params_flat`.
fn analytic_flat(model: &Model, inputs: &[&ExampleInput], labels: &[Vec<f64>]) -> Vec<f64> {
    let (features, enc_cache) = model.encoder.forward_train(inputs).unwrap();
    let (logits, head_cache) = model.head.logits(&features).unwrap();
    let (_, dlogits) = soft_cross_entropy(&logits, labels).unwrap();
    let head_grads = model.head.backward(&head_cache, &dlogits);
    let enc_grads = model.encoder.backward(&enc_cache, &head_grads.dfeatures).unwrap();
    let mut flat = Vec::new();
    for g in enc_grads {
        flat.extend(g);
    }
    flat.extend(head_grads.dw);
    flat.push(head_grads.dlog_tau);
    flat
}

#[test]
fn c04_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let instances = 6usize;
    for k in 0..instances {
        let mut r = rng::seeded(0xACC4, "instance", k as u64);
        let (classes, batch) = (2 + k % 4, 2 + k % 5);
        let (model, inputs): (Model, Vec<ExampleInput>) = if k == instances - 1 {
            // One convolutional instance; the rest are MLPs of varied shape.
            let out_dim = 6;
            let encoder = Encoder::Conv(swat_core::model::ConvEncoder::new(1, out_dim, &mut r));
            let w = Array2::from_shape_fn((classes, out_dim), |_| r.random::<f64>() - 0.5);
            let head = CosineHead::new(w, 0.05).unwrap();
            let inputs = (0..batch)
                .map(|_| {
                    let data: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
                    ExampleInput::Image(ImageTensor::new(1, 8, 8, data).unwrap())
                })
                .collect();
            (Model::new(encoder, head, StageTag::Pretrained).unwrap(), inputs)
        } else {
            let (in_dim, hidden, out_dim) = (3 + k, 4 + k, 4 + k % 3);
            let encoder = Encoder::Mlp(MlpEncoder::new(in_dim, hidden, out_dim, &mut r));
            let w = Array2::from_shape_fn((classes, out_dim), |_| r.random::<f64>() - 0.5);
            let head = CosineHead::new(w, 0.01 + 0.1 * k as f64).unwrap();
            let inputs = (0..batch)
                .map(|_| {
                    ExampleInput::Features(
                        (0..in_dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
                    )
                })
                .collect();
            (Model::new(encoder, head, StageTag::Pretrained).unwrap(), inputs)
        };
        let labels: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| r.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let input_refs: Vec<&ExampleInput> = inputs.iter().collect();

        let mut model = model;
        let analytic = analytic_flat(&model, &input_refs, &labels);
        let theta = model.params_flat();
        assert_eq!(analytic.len(), theta.len(), "one gradient per parameter");
        for i in 0..theta.len() {
            let h = 1e-5 * theta[i].abs().max(1.0);
            set_flat(&mut model, i, theta[i] + h);
            let up = loss_of(&model, &input_refs, &labels);
            set_flat(&mut model, i, theta[i] - h);
            let down = loss_of(&model, &input_refs, &labels);
            set_flat(&mut model, i, theta[i]);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs()
                / analytic[i].abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
            checked += 1;
        }
    }

    let ok = worst <= 1e-4;
    let detail = format!(
        "{} instances, {} parameters, worst relative error {:.2e}",
        instances, checked, worst
    );
    assert!(
        verdict(4, "gradients match finite differences", ok, &detail, t0),
        "{}",
        detail
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: classifier retraining recovers rare classes after a
// retrieved-only stage 1 on the standard task.
// ---------------------------------------------------------------------------

#[test]
fn c05_stage2_recovers_rare_classes() {
    let t0 = Instant::now();
    let cfg = standard_config();
    let (mut d_rare, mut d_common) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let prepared = prepare_seed(&cfg, seed).unwrap();
        let split = split_common_rare(&prepared.retrieved_counts).unwrap();
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        // Mixing off: this gate isolates the imbalance effect of the
        // retrieved-only pool from augmentation.
        tc.msda.method = swat_core::augment::MsdaMethod::None;
        let (m1, _) = stage1_finetune(prepared.model, &prepared.retrieved, &tc, None).unwrap();
        let before = evaluate(&m1, &prepared.test, &split, "stage1", seed).unwrap();
        let (m2, _) = stage2_retrain_classifier(m1, &prepared.fewshot, &tc, None).unwrap();
        let after = evaluate(&m2, &prepared.test, &split, "stage2", seed).unwrap();
        d_rare.push(after.rare - before.rare);
        d_common.push(after.common - before.common);
    }
    let (rare, _) = mean_std(&d_rare);
    let (common, _) = mean_std(&d_common);

    let ok = rare >= 5.0 && rare > common && t0.elapsed().as_secs() < 600;
    let detail = format!("rare {:+.2}, common {:+.2} over 5 seeds", rare, common);
    assert!(verdict(5, "stage-2 rare-class recovery", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 6: the domain probe certifies a 4-sigma gap and clears
// identical sources.
// ---------------------------------------------------------------------------

#[test]
fn c06_domain_probe_detects_gap_and_clears_identical() {
    let t0 = Instant::now();
    let mut shifted_cfg = standard_config();
    shifted_cfg.task.synthetic.as_mut().unwrap().domain_shift = 4.0;
    let mut identical_cfg = standard_config();
    identical_cfg.task.synthetic.as_mut().unwrap().domain_shift = 0.0;

    let shifted: Vec<f64> =
        (0..10).map(|s| run_probe_gap(&shifted_cfg, s).unwrap().accuracy).collect();
    let identical: Vec<f64> =
        (0..10).map(|s| run_probe_gap(&identical_cfg, s).unwrap().accuracy).collect();
    let (shifted_mean, _) = mean_std(&shifted);
    let (identical_mean, _) = mean_std(&identical);

    let ok = shifted_mean >= 90.0
        && (45.0..=55.0).contains(&identical_mean)
        && t0.elapsed().as_secs() < 120;
    let detail = format!(
        "4-sigma shift {:.1}%, identical sources {:.1}% (10 seeds each)",
        shifted_mean, identical_mean
    );
    assert!(verdict(6, "domain-gap probe", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 7: method ordering on the standard task.
// ---------------------------------------------------------------------------

#[test]
fn c07_method_ordering_holds() {
    let t0 = Instant::now();
    let cfg = standard_config();
    let (mut zs, mut probe, mut fs, mut sw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let prepared = prepare_seed(&cfg, seed).unwrap();
        let split = split_common_rare(&prepared.retrieved_counts).unwrap();
        let mut tc = cfg.train.clone();
        tc.seed = seed;

        zs.push(evaluate(&prepared.model, &prepared.test, &split, "zeroshot", seed)
            .unwrap()
            .overall);
        let (m, _) =
            train_linear_probe(prepared.model.clone(), &prepared.fewshot, &tc, None).unwrap();
        probe.push(evaluate(&m, &prepared.test, &split, "probe", seed).unwrap().overall);
        let (m, _) = fsft(prepared.model.clone(), &prepared.fewshot, &tc, None).unwrap();
        fs.push(evaluate(&m, &prepared.test, &split, "fsft", seed).unwrap().overall);
        let pool = mix_pools(&prepared.retrieved, &prepared.fewshot).unwrap();
        let (m, _) = stage1_finetune(prepared.model, &pool, &tc, None).unwrap();
        let (m, _) = stage2_retrain_classifier(m, &prepared.fewshot, &tc, None).unwrap();
        sw.push(evaluate(&m, &prepared.test, &split, "swat", seed).unwrap().overall);
    }
    let m = |v: &[f64]| mean_std(v).0;
    let (zs, probe, fs, sw) = (m(&zs), m(&probe), m(&fs), m(&sw));

    let ok = sw >= fs
        && fs >= probe
        && probe >= zs
        && sw - probe >= 3.0
        && t0.elapsed().as_secs() < 900;
    let detail = format!(
        "swat {:.2} >= fsft {:.2} >= probe {:.2} >= zero-shot {:.2}; swat-probe {:+.2}",
        sw,
        fs,
        probe,
        zs,
        sw - probe
    );
    assert!(verdict(7, "method ordering", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 8: longer stage-2 retraining does not overfit.
// ---------------------------------------------------------------------------

#[test]
fn c08_stage2_epochs_do_not_overfit() {
    let t0 = Instant::now();
    let cfg = standard_config();
    let grid = [5usize, 10, 20, 50];
    let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for seed in 0..3 {
        let prepared = prepare_seed(&cfg, seed).unwrap();
        let split = split_common_rare(&prepared.retrieved_counts).unwrap();
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let pool = mix_pools(&prepared.retrieved, &prepared.fewshot).unwrap();
        let (m1, _) = stage1_finetune(prepared.model, &pool, &tc, None).unwrap();
        for (gi, &epochs) in grid.iter().enumerate() {
            let mut te = tc.clone();
            te.epochs_stage2 = epochs;
            let (m2, _) =
                stage2_retrain_classifier(m1.clone(), &prepared.fewshot, &te, None).unwrap();
            per_point[gi]
                .push(evaluate(&m2, &prepared.test, &split, "swat", seed).unwrap().overall);
        }
    }
    let means: Vec<f64> = per_point.iter().map(|v| mean_std(v).0).collect();
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = *means.last().unwrap();

    let ok = last >= max - 2.0;
    let detail = format!(
        "accuracy at epochs {:?} = {:?}, final vs max {:+.2}",
        grid,
        means.iter().map(|v| format!("{:.1}", v)).collect::<Vec<_>>(),
        last - max
    );
    assert!(verdict(8, "stage-2 epoch curve stays flat", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 9: repeated runs are bit-identical.
// ---------------------------------------------------------------------------

#[test]
fn c09_repeated_swat_runs_are_bit_identical() {
    let t0 = Instant::now();
    let mut cfg = standard_config();
    cfg.seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&cfg, Method::Swat, &out_a).unwrap();
    run_experiment(&cfg, Method::Swat, &out_b).unwrap();

    let mut identical = true;
    let mut compared = 0usize;
    for rel in ["seed_0/checkpoint.bin", "seed_0/report.json", "aggregate.json"] {
        let a = std::fs::read(out_a.join(rel)).unwrap();
        let b = std::fs::read(out_b.join(rel)).unwrap();
        identical &= a == b;
        compared += 1;
    }

    let ok = identical;
    let detail = format!("{} artifacts byte-compared (checkpoint, report, aggregate)", compared);
    assert!(verdict(9, "repeated runs bit-identical", ok, &detail, t0), "{}", detail);
}

// ---------------------------------------------------------------------------
// Criterion 10: the retrieval-size sweep completes with a 4-row
// monotonicity report.
// ---------------------------------------------------------------------------

#[test]
fn c10_retrieval_size_sweep_reports_monotonicity() {
    let t0 = Instant::now();
    let mut cfg = standard_config();
    cfg.seeds = vec![0, 1];
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<String> =
        ["10", "100", "300", "500"].iter().map(|s| s.to_string()).collect();
    let report =
        sweep(&cfg, Method::Swat, SweepAxis::RetrievalK, &values, dir.path()).unwrap();

    let mono = std::fs::read_to_string(dir.path().join("monotonicity.txt")).unwrap();
    let rows = mono.lines().filter(|l| l.starts_with("value=")).count();
    let csv_rows =
        std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count();

    let ok = report.cells.len() == 4
        && rows == 4
        && mono.contains("trend:")
        && csv_rows == 5
        && dir.path().join("sweep.svg").is_file();
    let detail = format!(
        "k -> mean: {}",
        report
            .cells
            .iter()
            .map(|c| format!("{}={:.1}", c.value, c.aggregate.overall.mean))
            .collect::<Vec<_>>()
            .join(", ")
    );
    assert!(verdict(10, "retrieval-size sweep report", ok, &detail, t0), "{}", detail);
}
