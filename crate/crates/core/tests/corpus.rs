mod common;

use std::collections::HashSet;

use duallab::align::{expand, DurationSeq};
use duallab::synth::{
    make_corpus, render_trace, sample_durations, sample_sentence, seeded_rng, CorpusConfig,
    Dataset, DurationConfig, Grammar, RenderConfig, Split, VisemeTable,
};
use duallab::vocab::{is_silence, TokenMode, Vocabulary};

fn small(paired: f64) -> CorpusConfig {
    CorpusConfig {
        utterances: 120,
        paired_fraction: paired,
        ..CorpusConfig::default()
    }
}

#[test]
fn grammar_enumerates_distinct_sentences() {
    let g = Grammar::grid();
    let sizes: Vec<usize> = g.slots().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![4, 4, 4, 25, 10, 4]);
    let all: HashSet<Vec<&str>> = (0..g.sentence_count()).map(|i| g.sentence(i)).collect();
    assert_eq!(all.len(), 64_000);
}

#[test]
fn sampled_sentences_have_six_words() {
    let v = Vocabulary::characters();
    let g = Grammar::grid();
    for seed in 0..100 {
        let t = sample_sentence(&g, &v, &mut seeded_rng(seed, &[]));
        assert_eq!(v.words(&t).len(), 6);
        assert!(is_silence(t.0[0]) && is_silence(*t.0.last().unwrap()));
        assert_eq!(t, sample_sentence(&g, &v, &mut seeded_rng(seed, &[])));
    }
}

#[test]
fn duration_ranges_without_cap() {
    let v = Vocabulary::characters();
    let g = Grammar::grid();
    let cfg = DurationConfig {
        max_total: 0,
        ..DurationConfig::default()
    };
    for seed in 0..100 {
        let mut rng = seeded_rng(seed, &[]);
        let t = sample_sentence(&g, &v, &mut rng);
        let d = sample_durations(&t, &mut rng, &cfg).unwrap();
        for (&tok, &n) in t.0.iter().zip(&d.0) {
            let range = if is_silence(tok) { 3..=8 } else { 2..=5 };
            assert!(range.contains(&n));
        }
    }
}

#[test]
fn degenerate_render_is_exact() {
    let v = Vocabulary::characters();
    let mut rng = seeded_rng(5, &[]);
    let table = VisemeTable::random(&v, 8, &mut rng);
    assert!(table.min_separation() >= 0.05);
    let t = v.encode_words(&["lay", "red"]).unwrap();
    let d = DurationSeq(vec![3, 2, 4, 2, 5, 2, 3, 2, 4]);
    let offset = vec![0.03; 8];
    let cfg = RenderConfig {
        noise_sigma: 0.0,
        coarticulation: 0,
    };
    let trace = render_trace(&t, &d, &offset, &table, &cfg, &mut rng).unwrap();
    assert_eq!(trace.frames(), d.total());
    let unrolled = expand(&t, &d).unwrap();
    for (k, &tok) in unrolled.0.iter().enumerate() {
        for (c, &x) in trace.frame(k).iter().enumerate() {
            let want = (table.vector(tok)[c] + 0.03) as f32 as f64;
            assert_eq!(x, want);
        }
    }
}

// Nearest-vector labelling of frames whose smoothing window stays inside
// one token, under default noise and speaker offsets.
#[test]
fn frames_are_identifiable() {
    for mode in [TokenMode::Character, TokenMode::Phoneme] {
        let cfg = CorpusConfig {
            utterances: 300,
            token_mode: mode,
            ..CorpusConfig::default()
        };
        let corpus = make_corpus(&cfg).unwrap();
        let w = cfg.coarticulation;
        let (mut hit, mut total) = (0usize, 0usize);
        for u in &corpus.utterances {
            let labels = expand(u.text.as_ref().unwrap(), u.durations.as_ref().unwrap()).unwrap();
            let tr = u.trace.as_ref().unwrap();
            for k in w..labels.len().saturating_sub(w) {
                let lab = labels.0[k];
                if (k - w..=k + w).any(|j| labels.0[j] != lab) {
                    continue;
                }
                let cand = corpus
                    .vocab
                    .spoken_ids()
                    .filter(|&i| !is_silence(i) || i == 1);
                let mut guess = corpus.table.nearest(tr.frame(k), cand);
                if is_silence(guess) && is_silence(lab) {
                    guess = lab;
                }
                hit += usize::from(guess == lab);
                total += 1;
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(total > 1000 && acc >= 0.99, "{mode}: {acc} over {total}");
    }
}

#[test]
fn splits_are_disjoint_and_complete() {
    let c = make_corpus(&small(0.1)).unwrap();
    let n = c.split_counts();
    assert_eq!(n.paired + n.text_only + n.lip_only + n.eval, 120);
    let rest = 120 - n.eval;
    assert!((n.paired as f64 - 0.1 * rest as f64).abs() <= 1.0);
    assert!(n.text_only.abs_diff(n.lip_only) <= 1);
    // eval held out per speaker
    for s in 0..4 {
        let mine = c.utterances.iter().filter(|u| u.speaker == s).count();
        let ev = c
            .utterances
            .iter()
            .filter(|u| u.speaker == s && u.split == Split::Eval)
            .count();
        assert_eq!(ev, (mine as f64 * 0.1).round() as usize);
    }
    let text_of = |s: Split| -> HashSet<_> {
        c.utterances
            .iter()
            .filter(|u| u.split == s)
            .map(|u| u.text.clone().unwrap())
            .collect()
    };
    assert!(text_of(Split::TextOnly).is_disjoint(&text_of(Split::LipOnly)));

    let ds = c.dataset();
    for u in &ds.utterances {
        match u.split {
            Split::TextOnly => assert!(u.trace.is_none() && u.durations.is_some()),
            Split::LipOnly => assert!(u.text.is_none() && u.durations.is_none()),
            _ => assert!(u.text.is_some() && u.trace.is_some()),
        }
    }

    let full = make_corpus(&small(1.0)).unwrap().split_counts();
    assert_eq!((full.text_only, full.lip_only), (0, 0));
    // the same utterances, only relabelled
    assert_eq!(full.eval, n.eval);
}

#[test]
fn written_corpus_is_reproducible() {
    let cfg = small(0.1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_corpus(&cfg).unwrap().write(a.path()).unwrap();
    make_corpus(&cfg).unwrap().write(b.path()).unwrap();
    let mut files = Vec::new();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap().to_path_buf();
        let x = std::fs::read(&entry).unwrap();
        let y = std::fs::read(b.path().join(&rel)).unwrap();
        assert_eq!(x, y, "{}", rel.display());
        files.push(rel);
    }
    assert!(files.len() > 60);

    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded, make_corpus(&cfg).unwrap().dataset());
    let manifest = std::fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        ["durations", "id", "speaker", "split", "text", "trace"]
    );
}

#[test]
fn unpaired_fraction_takes_prefixes() {
    let ds = make_corpus(&small(0.1)).unwrap().dataset();
    let none = ds.with_unpaired_fraction(0.0).counts();
    assert_eq!((none.text_only, none.lip_only), (0, 0));
    assert_eq!(none.paired, ds.counts().paired);
    let half = ds.with_unpaired_fraction(0.5);
    let ids: Vec<_> = half
        .split(Split::TextOnly)
        .iter()
        .map(|u| u.id.clone())
        .collect();
    let all: Vec<_> = ds
        .split(Split::TextOnly)
        .iter()
        .map(|u| u.id.clone())
        .collect();
    assert_eq!(ids[..], all[..ids.len()]);
}

#[test]
fn rejects_bad_fractions() {
    assert!(make_corpus(&small(0.0)).is_err());
    assert!(make_corpus(&small(1.5)).is_err());
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}
