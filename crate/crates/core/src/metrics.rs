//! Grouping accuracy, parsing accuracy, their template-level F1 variants and
//! the combined loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GroundTruth, LineId};
use crate::program::ParseResult;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line universes differ: {0}")]
pub struct UniverseMismatch(pub String);

/// Collapses whitespace runs to one space and trims both ends.
pub fn normalize_template(template: &str) -> String {
    template.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    /// `None` for the singleton group of an unmatched line.
    pub template: Option<String>,
    /// Sorted ascending.
    pub members: Vec<LineId>,
}

/// A partition of line ids by template text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grouping {
    groups: Vec<Group>,
    line_to_group: HashMap<LineId, usize>,
}

impl Grouping {
    /// Groups lines by exact key; groups are ordered by first member.
    pub fn from_keys<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (LineId, String, Option<String>)>,
    {
        let mut groups: Vec<Group> = Vec::new();
        let mut by_key: HashMap<String, usize> = HashMap::new();
        let mut line_to_group = HashMap::new();
        for (id, key, template) in rows {
            let g = *by_key.entry(key.clone()).or_insert_with(|| {
                groups.push(Group {
                    key,
                    template,
                    members: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].members.push(id);
            line_to_group.insert(id, g);
        }
        for g in &mut groups {
            g.members.sort_unstable();
        }
        Grouping {
            groups,
            line_to_group,
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_of(&self, id: LineId) -> Option<&Group> {
        self.line_to_group.get(&id).map(|&g| &self.groups[g])
    }

    pub fn key_of(&self, id: LineId) -> Option<&str> {
        self.group_of(id).map(|g| g.key.as_str())
    }

    pub fn total_lines(&self) -> usize {
        self.line_to_group.len()
    }

    pub fn universe(&self) -> BTreeSet<LineId> {
        self.line_to_group.keys().copied().collect()
    }

    fn check_universe(&self, other: &Grouping) -> Result<(), UniverseMismatch> {
        if self.line_to_group.len() != other.line_to_group.len()
            || self.line_to_group.keys().any(|id| !other.line_to_group.contains_key(id))
        {
            return Err(UniverseMismatch(format!(
                "{} predicted lines vs {} ground-truth lines",
                self.total_lines(),
                other.total_lines()
            )));
        }
        Ok(())
    }

    /// Whether `group`'s member set equals the `truth` group of its first member.
    fn group_matches(group: &Group, truth: &Grouping) -> Option<usize> {
        let first = *group.members.first()?;
        let &t = truth.line_to_group.get(&first)?;
        (truth.groups[t].members == group.members).then_some(t)
    }
}

/// Anything that can be partitioned into template groups.
pub trait ToGrouping {
    fn to_grouping(&self) -> Grouping;
}

impl ToGrouping for ParseResult {
    /// Unmatched lines each get a singleton group keyed by their raw content.
    fn to_grouping(&self) -> Grouping {
        Grouping::from_keys((1..=self.total_lines() as LineId).map(|id| match self.template(id) {
            Some(t) => (id, format!("T:{t}"), Some(t.to_owned())),
            None => (id, format!("U:{id}:{}", self.content(id)), None),
        }))
    }
}

impl ToGrouping for GroundTruth {
    fn to_grouping(&self) -> Grouping {
        Grouping::from_keys(
            self.templates()
                .iter()
                .map(|(&id, t)| (id, format!("T:{t}"), Some(t.clone()))),
        )
    }
}

pub fn to_grouping<T: ToGrouping + ?Sized>(source: &T) -> Grouping {
    source.to_grouping()
}

/// Fraction of lines whose predicted group has exactly the member set of
/// their ground-truth group.
pub fn grouping_accuracy(pred: &Grouping, truth: &Grouping) -> Result<f64, UniverseMismatch> {
    pred.check_universe(truth)?;
    let total = pred.total_lines();
    if total == 0 {
        return Ok(0.0);
    }
    let correct: usize = pred
        .groups
        .iter()
        .filter(|g| Grouping::group_matches(g, truth).is_some())
        .map(|g| g.members.len())
        .sum();
    Ok(correct as f64 / total as f64)
}

/// Fraction of lines whose predicted template equals the ground truth after
/// whitespace normalization. Unmatched lines are always wrong.
pub fn parsing_accuracy(pred: &ParseResult, truth: &GroundTruth) -> Result<f64, UniverseMismatch> {
    check_result_universe(pred, truth)?;
    let total = pred.total_lines();
    if total == 0 {
        return Ok(0.0);
    }
    let correct = (1..=total as LineId)
        .filter(|&id| template_correct(pred, truth, id))
        .count();
    Ok(correct as f64 / total as f64)
}

fn check_result_universe(pred: &ParseResult, truth: &GroundTruth) -> Result<(), UniverseMismatch> {
    let n = pred.total_lines();
    let dense = truth.len() == n
        && truth
            .templates()
            .keys()
            .zip(1..=n as LineId)
            .all(|(a, b)| *a == b);
    if dense {
        Ok(())
    } else {
        Err(UniverseMismatch(format!(
            "{n} predicted lines vs {} ground-truth lines",
            truth.len()
        )))
    }
}

fn template_correct(pred: &ParseResult, truth: &GroundTruth, id: LineId) -> bool {
    match (pred.template(id), truth.template(id)) {
        (Some(p), Some(t)) => normalize_template(p) == normalize_template(t),
        _ => false,
    }
}

fn f1(correct: usize, predicted: usize, actual: usize) -> f64 {
    if predicted == 0 || actual == 0 || correct == 0 {
        return 0.0;
    }
    let p = correct as f64 / predicted as f64;
    let r = correct as f64 / actual as f64;
    2.0 * p * r / (p + r)
}

/// F1 over groups: a predicted group is correct when its member set equals a
/// ground-truth group's member set.
pub fn fga(pred: &Grouping, truth: &Grouping) -> Result<f64, UniverseMismatch> {
    pred.check_universe(truth)?;
    let correct = pred
        .groups
        .iter()
        .filter(|g| Grouping::group_matches(g, truth).is_some())
        .count();
    Ok(f1(correct, pred.groups.len(), truth.groups.len()))
}

/// Like [`fga`], but a correct group must also carry the ground-truth template
/// string (whitespace-normalized). Unmatched singletons never count.
pub fn fta(pred: &Grouping, truth: &Grouping) -> Result<f64, UniverseMismatch> {
    pred.check_universe(truth)?;
    let correct = pred
        .groups
        .iter()
        .filter(|g| template_group_correct(g, truth))
        .count();
    Ok(f1(correct, pred.groups.len(), truth.groups.len()))
}

fn template_group_correct(group: &Group, truth: &Grouping) -> bool {
    let Some(t) = Grouping::group_matches(group, truth) else {
        return false;
    };
    match (&group.template, &truth.groups[t].template) {
        (Some(p), Some(t)) => normalize_template(p) == normalize_template(t),
        _ => false,
    }
}

/// `1 − (GA + PA + FGA + FTA) / 4`.
pub fn loss_from_metrics(ga: f64, pa: f64, fga: f64, fta: f64) -> f64 {
    1.0 - (ga + pa + fga + fta) / 4.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateVerdict {
    pub lines: usize,
    pub group_correct: bool,
    pub template_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ga: f64,
    pub pa: f64,
    pub fga: f64,
    pub fta: f64,
    pub loss: f64,
    pub total_lines: usize,
    pub predicted_groups: usize,
    pub truth_groups: usize,
    pub misgrouped_lines: BTreeSet<LineId>,
    pub template_mismatch_lines: BTreeSet<LineId>,
    pub unmatched_lines: BTreeSet<LineId>,
    /// Keyed by predicted template (or `UNMATCHED`).
    pub per_template_verdicts: BTreeMap<String, TemplateVerdict>,
}

impl EvalReport {
    pub fn score(&self) -> f64 {
        1.0 - self.loss
    }

    /// `GA PA FGA FTA LOSS`, four decimals each.
    pub fn summary_line(&self) -> String {
        format!(
            "{:.4} {:.4} {:.4} {:.4} {:.4}",
            self.ga, self.pa, self.fga, self.fta, self.loss
        )
    }

    /// Union of all diagnostic line sets.
    pub fn wrong_lines(&self) -> BTreeSet<LineId> {
        let mut all = self.unmatched_lines.clone();
        all.extend(&self.template_mismatch_lines);
        all.extend(&self.misgrouped_lines);
        all
    }

    pub fn is_perfect(&self) -> bool {
        self.loss == 0.0
    }
}

/// Computes every metric plus the per-line diagnostics.
pub fn evaluate(pred: &ParseResult, truth: &GroundTruth) -> Result<EvalReport, UniverseMismatch> {
    check_result_universe(pred, truth)?;
    let pg = pred.to_grouping();
    let tg = truth.to_grouping();
    let ga = grouping_accuracy(&pg, &tg)?;
    let pa = parsing_accuracy(pred, truth)?;
    let fga_v = fga(&pg, &tg)?;
    let fta_v = fta(&pg, &tg)?;

    let mut misgrouped = BTreeSet::new();
    let mut verdicts: BTreeMap<String, TemplateVerdict> = BTreeMap::new();
    for g in pg.groups() {
        let group_correct = Grouping::group_matches(g, &tg).is_some();
        if !group_correct {
            misgrouped.extend(g.members.iter().copied());
        }
        let key = g.template.clone().unwrap_or_else(|| "UNMATCHED".to_owned());
        let v = verdicts.entry(key).or_insert(TemplateVerdict {
            lines: 0,
            group_correct: true,
            template_correct: true,
        });
        v.lines += g.members.len();
        v.group_correct &= group_correct;
        v.template_correct &= template_group_correct(g, &tg);
    }
    let unmatched = pred.unmatched();
    let template_mismatch = (1..=pred.total_lines() as LineId)
        .filter(|&id| pred.template(id).is_some() && !template_correct(pred, truth, id))
        .collect();

    Ok(EvalReport {
        ga,
        pa,
        fga: fga_v,
        fta: fta_v,
        loss: loss_from_metrics(ga, pa, fga_v, fta_v),
        total_lines: pred.total_lines(),
        predicted_groups: pg.groups().len(),
        truth_groups: tg.groups().len(),
        misgrouped_lines: misgrouped,
        template_mismatch_lines: template_mismatch,
        unmatched_lines: unmatched,
        per_template_verdicts: verdicts,
    })
}
