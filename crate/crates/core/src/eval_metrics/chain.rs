use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

use super::{score_text, EvalScore, Reference, TextMetric};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainPart {
    Summary,
    Caption,
    Reasoning,
    Conclusion,
}

impl ChainPart {
    pub const ALL: [ChainPart; 4] = [
        ChainPart::Summary,
        ChainPart::Caption,
        ChainPart::Reasoning,
        ChainPart::Conclusion,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ChainPart::Summary => "summary",
            ChainPart::Caption => "caption",
            ChainPart::Reasoning => "reasoning",
            ChainPart::Conclusion => "conclusion",
        }
    }
}

impl fmt::Display for ChainPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Tagged reasoning output. Each segment is the trimmed text between the
/// first opening tag and the first matching closing tag after it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub summary: Option<String>,
    pub caption: Option<String>,
    pub reasoning: Option<String>,
    pub conclusion: Option<String>,
    pub well_formed: bool,
    pub missing: Vec<ChainPart>,
    pub duplicated: Vec<ChainPart>,
}

impl ReasoningChain {
    pub fn get(&self, part: ChainPart) -> Option<&str> {
        match part {
            ChainPart::Summary => self.summary.as_deref(),
            ChainPart::Caption => self.caption.as_deref(),
            ChainPart::Reasoning => self.reasoning.as_deref(),
            ChainPart::Conclusion => self.conclusion.as_deref(),
        }
    }

    fn slot(&mut self, part: ChainPart) -> &mut Option<String> {
        match part {
            ChainPart::Summary => &mut self.summary,
            ChainPart::Caption => &mut self.caption,
            ChainPart::Reasoning => &mut self.reasoning,
            ChainPart::Conclusion => &mut self.conclusion,
        }
    }

    /// Canonical tagged text, one segment per line. Absent segments are
    /// omitted.
    pub fn serialize(&self) -> String {
        ChainPart::ALL
            .iter()
            .filter_map(|&p| self.get(p).map(|s| format!("<{0}>{1}</{0}>", p.tag(), s)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Never fails; malformed chains are described by `well_formed`, `missing`
/// and `duplicated`.
pub fn parse_reasoning_chain(text: &str) -> ReasoningChain {
    let mut chain = ReasoningChain::default();
    let mut spans = Vec::new();
    for part in ChainPart::ALL {
        let open = format!("<{}>", part.tag());
        let close = format!("</{}>", part.tag());
        if text.matches(&open).count() > 1 {
            chain.duplicated.push(part);
        }
        let found = text.find(&open).and_then(|o| {
            let start = o + open.len();
            text[start..].find(&close).map(|c| (o, start, start + c, start + c + close.len()))
        });
        match found {
            Some((o, s, e, end)) => {
                *chain.slot(part) = Some(text[s..e].trim().to_string());
                spans.push((o, end));
            }
            None => chain.missing.push(part),
        }
    }
    chain.well_formed = chain.missing.is_empty()
        && chain.duplicated.is_empty()
        && spans.windows(2).all(|w| w[0].1 <= w[1].0);
    chain
}

/// Scores for one chain component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub present: bool,
    pub scores: Vec<EvalScore>,
}

const PROSE_METRICS: [TextMetric; 5] = [
    TextMetric::Similarity,
    TextMetric::Bleu,
    TextMetric::Rouge1,
    TextMetric::Rouge2,
    TextMetric::RougeL,
];

/// Similarity/BLEU/ROUGE on summary, caption and reasoning; exact match on
/// the conclusion. Missing predicted components score 0 with a
/// `missing_component` flag.
pub fn score_chain(pred: &ReasoningChain, reference: &ReasoningChain) -> Result<BTreeMap<ChainPart, ComponentScore>> {
    if !reference.well_formed {
        return Err(LabError::Config(format!(
            "reference chain is malformed (missing {:?}, duplicated {:?})",
            reference.missing, reference.duplicated
        )));
    }
    let mut out = BTreeMap::new();
    for part in ChainPart::ALL {
        let metrics: &[TextMetric] = if part == ChainPart::Conclusion {
            &[TextMetric::ExactMatch]
        } else {
            &PROSE_METRICS
        };
        let refr = Reference::text(reference.get(part).unwrap_or_default());
        let component = match pred.get(part) {
            Some(text) => ComponentScore {
                present: true,
                scores: metrics
                    .iter()
                    .map(|&m| score_text(m, text, &refr))
                    .collect::<Result<_>>()?,
            },
            None => ComponentScore {
                present: false,
                scores: metrics
                    .iter()
                    .map(|m| EvalScore::new(m.name(), 0.0).flagged("missing_component"))
                    .collect(),
            },
        };
        out.insert(part, component);
    }
    Ok(out)
}
