use divdec_core::corpus::MeaningRepresentation;
use divdec_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

// ---- brute-force reference implementation -------------------------------

fn occurrences(seq: &[u32], g: &[u32]) -> u64 {
    if seq.len() < g.len() {
        return 0;
    }
    (0..=seq.len() - g.len()).filter(|&i| &seq[i..i + g.len()] == g).count() as u64
}

fn brute_bleu(hyps: &[Vec<u32>], refs: &[Vec<Vec<u32>>]) -> f64 {
    let (mut m, mut t) = ([0u64; 4], [0u64; 4]);
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                // count each distinct n-gram once, at its first position
                if (0..i).any(|j| &h[j..j + n] == g) {
                    continue;
                }
                let mx = rs.iter().map(|x| occurrences(x, g)).max().unwrap();
                m[n - 1] += occurrences(h, g).min(mx);
            }
            t[n - 1] += (h.len() - n + 1) as u64;
        }
    }
    let mut logs = Vec::new();
    for n in 0..4 {
        if t[n] == 0 {
            continue;
        }
        if m[n] == 0 {
            return 0.0;
        }
        logs.push((m[n] as f64 / t[n] as f64).ln());
    }
    if logs.is_empty() || c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn brute_self_bleu(outs: &[Vec<u32>]) -> f64 {
    let mut s = 0.0;
    for i in 0..outs.len() {
        let others: Vec<Vec<u32>> = outs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o.clone()).collect();
        s += brute_bleu(&[outs[i].clone()], &[others]);
    }
    1.0 - s / outs.len() as f64
}

fn brute_distinct(outs: &[Vec<u32>], n: usize) -> f64 {
    let mut all: Vec<&[u32]> = Vec::new();
    for o in outs {
        if o.len() >= n {
            all.extend(o.windows(n));
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let mut uniq: Vec<&[u32]> = Vec::new();
    for g in &all {
        if !uniq.contains(g) {
            uniq.push(g);
        }
    }
    uniq.len() as f64 / all.len() as f64
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<u32>>, Vec<Vec<Vec<u32>>>) {
    let n = rng.gen_range(2..=10);
    let vocab = rng.gen_range(2..8);
    let sent = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..vocab)).collect::<Vec<u32>>();
    let hyps: Vec<Vec<u32>> = (0..n).map(|_| sent(rng)).collect();
    let refs = (0..n)
        .map(|_| (0..rng.gen_range(1..4)).map(|_| sent(rng)).collect())
        .collect();
    (hyps, refs)
}

// ---- BLEU ----------------------------------------------------------------

#[test]
fn identical_hypotheses_score_one() {
    let hyps = vec![words("the hotel is cheap"), words("goodbye and thanks for calling")];
    let refs: Vec<Vec<Vec<String>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
    assert_eq!(bleu4(&hyps, &refs).unwrap(), 1.0);
}

#[test]
fn clipped_unigram_precision_of_classic_example() {
    let p = ngram_profile(
        &[words("the the the the the the the")],
        &[vec![words("the cat is on the mat")]],
    )
    .unwrap();
    assert_eq!(p.matches[0], 2);
    assert_eq!(p.totals[0], 7);
    assert_eq!(p.precision(1), Some(2.0 / 7.0));
}

#[test]
fn bleu_matches_brute_force_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (hyps, refs) = random_corpus(&mut rng);
        let got = bleu4(&hyps, &refs).unwrap();
        assert!((got - brute_bleu(&hyps, &refs)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn bleu_is_invariant_under_token_renaming() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (hyps, refs) = random_corpus(&mut rng);
        let rename = |s: &Vec<u32>| s.iter().map(|t| (t * 7 + 3) % 101).collect::<Vec<u32>>();
        let h2: Vec<Vec<u32>> = hyps.iter().map(rename).collect();
        let r2: Vec<Vec<Vec<u32>>> = refs.iter().map(|rs| rs.iter().map(rename).collect()).collect();
        assert_eq!(bleu4(&hyps, &refs).unwrap(), bleu4(&h2, &r2).unwrap());
    }
}

#[test]
fn bleu_input_errors() {
    let none: Vec<Vec<u32>> = vec![];
    assert!(bleu4(&none, &Vec::<Vec<Vec<u32>>>::new()).is_err());
    assert!(bleu4(&[vec![1u32]], &[Vec::<Vec<u32>>::new()]).is_err());
}

// ---- Self-BLEU -----------------------------------------------------------

#[test]
fn self_bleu_extremes() {
    let same = vec![words("the hotel is cheap and nice"); 4];
    assert_eq!(self_bleu(&same).unwrap(), 0.0);
    let disjoint = vec![words("a b c d e"), words("f g h i j"), words("k l m n o")];
    assert_eq!(self_bleu(&disjoint).unwrap(), 1.0);
    assert!(self_bleu(&[words("only one")]).is_err());
}

#[test]
fn self_bleu_of_five_sentence_fixture() {
    let outs: Vec<Vec<String>> = include_str!("fixtures/five_outputs.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(words)
        .collect();
    // independent Python computation
    assert!((self_bleu(&outs).unwrap() - 0.6203763831954499).abs() < 1e-12);
    // hand counts: 16/41 unigrams, 21/36 bigrams, 23/26 four-grams
    assert_eq!(distinct_n(&outs, 1), 16.0 / 41.0);
    assert_eq!(distinct_n(&outs, 2), 21.0 / 36.0);
    assert_eq!(distinct_n(&outs, 4), 23.0 / 26.0);
    assert_eq!(distinct_sentence(&outs), 1.0);
}

#[test]
fn self_bleu_and_distinct_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (outs, _) = random_corpus(&mut rng);
        assert!((self_bleu(&outs).unwrap() - brute_self_bleu(&outs)).abs() < 1e-12);
        for n in [1, 2, 4] {
            assert!((distinct_n(&outs, n) - brute_distinct(&outs, n)).abs() < 1e-12);
        }
    }
}

#[test]
fn self_bleu_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (mut outs, _) = random_corpus(&mut rng);
        let a = self_bleu(&outs).unwrap();
        outs.reverse();
        assert!((a - self_bleu(&outs).unwrap()).abs() < 1e-12);
    }
}

// ---- distinct-n ----------------------------------------------------------

#[test]
fn distinct_counts() {
    let outs = vec![words("a b"), words("a b")];
    assert_eq!(distinct_n(&outs, 1), 0.5);
    assert_eq!(distinct_sentence(&outs), 0.5);
    assert_eq!(distinct_n(&[words("a b c d")], 1), 1.0);
}

#[test]
fn duplicating_the_corpus_halves_distinct_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (outs, _) = random_corpus(&mut rng);
        let doubled: Vec<Vec<u32>> = outs.iter().chain(&outs).cloned().collect();
        for n in [1, 2, 4] {
            assert_eq!(distinct_n(&doubled, n), distinct_n(&outs, n) / 2.0);
        }
    }
}

// ---- slot error ----------------------------------------------------------

fn mr(s: &str) -> MeaningRepresentation {
    s.parse().unwrap()
}

#[test]
fn slot_error_counts() {
    let m = mr("inform(name=SLOT_NAME,area=SLOT_AREA)");
    let exact = slot_error(&words("SLOT_NAME is in SLOT_AREA"), &m);
    assert_eq!(exact.rate(), 0.0);
    assert_eq!(slot_error(&words("SLOT_NAME is nice"), &m).rate(), 0.5);
    // both present plus one foreign placeholder: one redundant of two required
    let extra = slot_error(&words("SLOT_NAME in SLOT_AREA near SLOT_FOOD"), &m);
    assert_eq!((extra.missing, extra.redundant, extra.required), (0, 1, 2));
    assert_eq!(extra.rate(), 0.5);
    let repeated = slot_error(&words("SLOT_NAME SLOT_NAME SLOT_NAME"), &m);
    assert_eq!(repeated.rate(), 1.5);
    let none = slot_error(&words("goodbye SLOT_NAME"), &mr("bye()"));
    assert!(none.no_slots());
    assert_eq!(none.rate(), 0.0);
}

#[test]
fn slot_error_zero_iff_placeholder_multisets_agree() {
    let m = mr("inform(name=SLOT_NAME,area=SLOT_AREA);request(food)");
    let cases = [
        ("SLOT_AREA has SLOT_NAME", true),
        ("SLOT_NAME SLOT_NAME SLOT_AREA", false),
        ("SLOT_NAME", false),
        ("SLOT_NAME SLOT_AREA SLOT_FOOD", false),
    ];
    for (o, zero) in cases {
        assert_eq!(slot_error(&words(o), &m).rate() == 0.0, zero, "{o}");
    }
}

#[test]
fn evaluate_reports_all_columns() {
    let m = mr("inform(name=SLOT_NAME)");
    let outs = vec![words("SLOT_NAME is nice"), words("SLOT_NAME is good")];
    let refs = vec![vec![words("SLOT_NAME is nice")], vec![words("SLOT_NAME is nice")]];
    let r = evaluate(&outs, &[&m, &m], &refs).unwrap();
    assert_eq!(r.slot_error, 0.0);
    assert_eq!(r.distinct_sentence, 1.0);
    assert_eq!(r.distinct_1, 4.0 / 6.0);
    assert_eq!(EvalReport::from_values(r.values()), r);
    assert_eq!(REPORT_COLUMNS.len(), r.values().len());
}
