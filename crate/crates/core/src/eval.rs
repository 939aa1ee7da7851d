//! Lexical metrics, per-category aggregation and the quality/budget sweep.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Category, QaItem};
use crate::retrieval::Variant;

pub const NORMALIZATION_NOTE: &str = "lowercase; delete characters that are neither alphanumeric nor whitespace; drop tokens a/an/the; split on whitespace; BLEU-1 includes brevity penalty min(1, exp(1 - |ref|/|cand|)); empty candidate or reference scores 0";

pub const DEFAULT_SWEEP_KS: [usize; 5] = [1, 2, 3, 5, 10];

pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(cand: &[String], reference: &[String]) -> usize {
    let r = counts(reference);
    counts(cand)
        .iter()
        .map(|(t, c)| (*c).min(r.get(t).copied().unwrap_or(0)))
        .sum()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn token_f1(candidate: &str, reference: &str) -> Prf {
    let c = normalize(candidate);
    let r = normalize(reference);
    if c.is_empty() || r.is_empty() {
        return Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let o = overlap(&c, &r) as f64;
    let precision = o / c.len() as f64;
    let recall = o / r.len() as f64;
    Prf {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let c = normalize(candidate);
    let r = normalize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let precision = overlap(&c, &r) as f64 / c.len() as f64;
    let bp = (1.0 - r.len() as f64 / c.len() as f64).exp().min(1.0);
    precision * bp
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = normalize(candidate);
    let r = normalize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    harmonic(l / c.len() as f64, l / r.len() as f64)
}

/// Optional model-graded score. No implementation ships with the engine.
pub trait Judge: Send + Sync {
    fn label(&self) -> String;
    fn score(&self, question: &str, reference: &str, candidate: &str) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub question_id: String,
    pub category: Category,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub input_tokens: usize,
    pub k: usize,
    pub variant: Variant,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
}

impl MetricRow {
    pub fn score(
        item: &QaItem,
        answer: &str,
        input_tokens: usize,
        variant: Variant,
        k: usize,
    ) -> MetricRow {
        let prf = token_f1(answer, &item.answer);
        MetricRow {
            question_id: item.question_id.clone(),
            category: item.category,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            bleu1: bleu1(answer, &item.answer),
            rouge_l: rouge_l(answer, &item.answer),
            input_tokens,
            k,
            variant,
            answer: answer.to_string(),
            judge: None,
        }
    }
}

/// Means over a group of rows. Quality metrics are scaled by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub input_tokens: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> Aggregate {
        let rows: Vec<&MetricRow> = rows.into_iter().collect();
        let n = rows.len();
        let mean = |f: &dyn Fn(&MetricRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let judged: Vec<f64> = rows.iter().filter_map(|r| r.judge).collect();
        Aggregate {
            count: n,
            precision: 100.0 * mean(&|r| r.precision),
            recall: 100.0 * mean(&|r| r.recall),
            f1: 100.0 * mean(&|r| r.f1),
            bleu1: 100.0 * mean(&|r| r.bleu1),
            rouge_l: 100.0 * mean(&|r| r.rouge_l),
            input_tokens: mean(&|r| r.input_tokens as f64),
            judge: (!judged.is_empty())
                .then(|| 100.0 * judged.iter().sum::<f64>() / judged.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub per_category: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<MetricRow>, mut config: BTreeMap<String, String>) -> EvalReport {
        let per_category = Category::ALL
            .iter()
            .filter(|c| rows.iter().any(|r| r.category == **c))
            .map(|c| {
                (
                    c.as_str().to_string(),
                    Aggregate::of(rows.iter().filter(|r| r.category == *c)),
                )
            })
            .collect();
        let overall = Aggregate::of(&rows);
        config
            .entry("normalization".into())
            .or_insert_with(|| NORMALIZATION_NOTE.into());
        EvalReport {
            rows,
            per_category,
            overall,
            config,
        }
    }
}

/// An answer and the prompt size that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answered {
    pub text: String,
    pub input_tokens: usize,
}

/// Scores every item. Answers are produced in parallel; rows keep input order.
pub fn evaluate<E, F>(
    items: &[QaItem],
    variant: Variant,
    k: usize,
    answer_fn: F,
    judge: Option<&dyn Judge>,
    config: BTreeMap<String, String>,
) -> Result<EvalReport, E>
where
    F: Fn(&QaItem) -> Result<Answered, E> + Sync,
    E: Send,
{
    let rows: Vec<MetricRow> = items
        .par_iter()
        .map(|item| {
            let a = answer_fn(item)?;
            let mut row = MetricRow::score(item, &a.text, a.input_tokens, variant, k);
            if let Some(j) = judge {
                row.judge = j.score(&item.question, &item.answer, &a.text).ok();
            }
            Ok(row)
        })
        .collect::<Result<_, E>>()?;
    Ok(EvalReport::from_rows(rows, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    /// 0 for variants without retrieval.
    pub k: usize,
    pub questions: usize,
    pub mean_input_tokens: f64,
    pub f1: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
}

/// One row per (retrieval variant, k), plus one row per non-retrieval variant.
pub fn pareto_sweep<E, F>(
    items: &[QaItem],
    variants: &[Variant],
    ks: &[usize],
    answer_fn: F,
) -> Result<Vec<SweepRow>, E>
where
    F: Fn(&QaItem, Variant, usize) -> Result<Answered, E> + Sync,
    E: Send,
{
    if ks.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let settings: Vec<usize> = if variant.uses_retrieval() {
            ks.to_vec()
        } else {
            vec![0]
        };
        for k in settings {
            let report = evaluate(
                items,
                variant,
                k,
                |item| answer_fn(item, variant, k),
                None,
                BTreeMap::new(),
            )?;
            rows.push(SweepRow {
                variant,
                k,
                questions: report.overall.count,
                mean_input_tokens: report.overall.input_tokens,
                f1: report.overall.f1,
                bleu1: report.overall.bleu1,
                rouge_l: report.overall.rouge_l,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize("The cat!"), vec!["cat"]);
        assert!(normalize("").is_empty());
        assert_eq!(normalize("5 August, 2023"), vec!["5", "august", "2023"]);
    }

    #[test]
    fn f1_examples() {
        let p = token_f1("paris", "paris");
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = token_f1("the red car", "red car");
        assert_eq!(p.f1, 1.0);
        let p = token_f1("big red car", "red car");
        assert!(close(p.precision, 2.0 / 3.0) && close(p.recall, 1.0) && close(p.f1, 0.8));
        let p = token_f1("", "x");
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1("John adopted a dog", "John adopted a dog"), 1.0);
        assert!(close(bleu1("the cat", "the cat sat"), (-1.0f64).exp()));
        assert_eq!(bleu1("a a a", "cat"), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("x y z", "x y z"), 1.0);
        assert!(close(rouge_l("x cat sat", "x dog sat"), 2.0 / 3.0));
        assert_eq!(rouge_l("one two", "three four"), 0.0);
    }

    fn item(id: &str, category: Category, answer: &str) -> QaItem {
        QaItem {
            question_id: id.into(),
            question: format!("question {id}?"),
            answer: answer.into(),
            category,
            evidence: vec![],
            evidence_sessions: vec![],
        }
    }

    #[test]
    fn exact_answers_aggregate_to_100() {
        let items = vec![
            item("q1", Category::SingleHop, "paris"),
            item("q2", Category::Temporal, "5 August, 2023"),
        ];
        let report = evaluate(
            &items,
            Variant::Evolving,
            3,
            |i| {
                Ok::<_, ()>(Answered {
                    text: i.answer.clone(),
                    input_tokens: 10,
                })
            },
            None,
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(report.overall.f1, 100.0);
        assert_eq!(report.per_category.len(), 2);
        assert_eq!(report.rows[0].question_id, "q1");
        assert!(report.config["normalization"].contains("brevity"));
    }

    #[test]
    fn overall_is_count_weighted_mean_of_categories() {
        let items: Vec<QaItem> = (0..7)
            .map(|i| {
                let cat = Category::ALL[i % 3];
                item(&format!("q{i}"), cat, "alpha beta gamma")
            })
            .collect();
        let answers = ["alpha", "beta gamma", "zeta", "alpha beta", "gamma", "", "alpha beta gamma"];
        let report = evaluate(
            &items,
            Variant::Utterance,
            1,
            |i| {
                let n: usize = i.question_id[1..].parse().unwrap();
                Ok::<_, ()>(Answered {
                    text: answers[n].into(),
                    input_tokens: n,
                })
            },
            None,
            BTreeMap::new(),
        )
        .unwrap();
        let weighted: f64 = report
            .per_category
            .values()
            .map(|a| a.f1 * a.count as f64)
            .sum::<f64>()
            / report.overall.count as f64;
        assert!((weighted - report.overall.f1).abs() < 1e-9);
    }

    #[test]
    fn sweep_shapes() {
        let items = vec![item("q1", Category::SingleHop, "x")];
        let answer = |_: &QaItem, _: Variant, k: usize| {
            Ok::<_, ()>(Answered {
                text: "x".into(),
                input_tokens: 5 + 10 * k,
            })
        };
        let rows = pareto_sweep(&items, &[Variant::Observation, Variant::Session], &[1, 3], answer).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].mean_input_tokens >= rows[0].mean_input_tokens);
        assert_eq!(rows[2].k, 0);
        assert!(pareto_sweep(&items, &[Variant::Observation], &[], answer).unwrap().is_empty());
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["cat", "dog", "sat", "mat", "red", "a", "the"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn precision_recall_swap(a in tokens(), b in tokens()) {
            let (a, b) = (a.join(" "), b.join(" "));
            prop_assert!(close(token_f1(&a, &b).precision, token_f1(&b, &a).recall));
        }

        #[test]
        fn metrics_in_unit_interval(a in tokens(), b in tokens()) {
            let (a, b) = (a.join(" "), b.join(" "));
            let p = token_f1(&a, &b);
            for v in [p.precision, p.recall, p.f1, bleu1(&a, &b), rouge_l(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn perfect_scores_iff_equal(a in tokens(), b in tokens(), shuffle in any::<bool>()) {
            let mut b = b;
            if shuffle {
                b = a.clone();
                b.reverse();
            }
            let (sa, sb) = (a.join(" "), b.join(" "));
            let (na, nb) = (normalize(&sa), normalize(&sb));
            prop_assume!(!na.is_empty() && !nb.is_empty());
            let mut ma = na.clone();
            let mut mb = nb.clone();
            ma.sort();
            mb.sort();
            let multiset_equal = ma == mb;
            prop_assert_eq!(token_f1(&sa, &sb).f1 == 1.0, multiset_equal);
            prop_assert_eq!(bleu1(&sa, &sb) == 1.0, multiset_equal);
            prop_assert_eq!(rouge_l(&sa, &sb) == 1.0, na == nb);
        }
    }
}
