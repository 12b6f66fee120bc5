use crate::tree::{Branch, Derivation, SplitTest, SymbolicVerdict, TraceStep};
use crate::types::Schema;

use super::{Backend, LlmError};

fn step_sentence(s: &TraceStep) -> String {
    let left = s.branch == Branch::Left;
    let why = match &s.predicate {
        SplitTest::NumericLe { threshold } => {
            format!("which is {} {threshold}", if left { "≤" } else { ">" })
        }
        SplitTest::CategoricalIn { categories } => {
            format!("which is {}in {{{}}}", if left { "" } else { "not " }, categories.join(", "))
        }
        SplitTest::BooleanIs { .. } => {
            format!("which {} {}", if left { "satisfies" } else { "fails" }, s.rendered)
        }
    };
    let side = if left { "left" } else { "right" };
    format!("Because {} = {}, {why}, took the {side} branch.", s.feature, s.observed)
}

fn check_steps(steps: &[TraceStep], schema: &Schema) -> Result<(), LlmError> {
    for s in steps {
        match schema.feature(s.feature_index) {
            Some(f) if f.name == s.feature => {}
            _ => {
                return Err(LlmError::SchemaMismatch(format!(
                    "trace names feature `{}` at index {}",
                    s.feature, s.feature_index
                )))
            }
        }
    }
    Ok(())
}

/// The verdict as a list of English sentences: one per trace step, then the
/// outcome. Template-based and deterministic.
pub fn verbalize_sentences(verdict: &SymbolicVerdict, schema: &Schema) -> Result<Vec<String>, LlmError> {
    schema.label_index(&verdict.outcome)?;
    let outcome = format!("Outcome {} (confidence {:.2})", verdict.outcome, verdict.confidence);
    match &verdict.derivation {
        Derivation::Tree(trace) => {
            check_steps(&trace.steps, schema)?;
            if trace.steps.is_empty() {
                return Ok(vec![format!("{outcome} at the root leaf.")]);
            }
            let mut out: Vec<String> = trace.steps.iter().map(step_sentence).collect();
            out.push(format!("{outcome}."));
            Ok(out)
        }
        Derivation::Forest { traces, votes } => {
            for t in traces {
                check_steps(&t.steps, schema)?;
            }
            let tally: Vec<String> = schema
                .labels()
                .iter()
                .zip(votes)
                .map(|(l, v)| format!("{l} {v}"))
                .collect();
            Ok(vec![
                format!("A forest of {} trees voted {}.", traces.len(), tally.join(", ")),
                format!("{outcome}."),
            ])
        }
    }
}

pub fn verbalize_verdict(verdict: &SymbolicVerdict, schema: &Schema) -> Result<String, LlmError> {
    Ok(verbalize_sentences(verdict, schema)?.join(" "))
}

/// Asks `backend` to rephrase the template rendering. The polished text is used
/// only if it still contains the outcome verbatim; otherwise, or on any
/// backend error, the template rendering is returned.
pub fn polish_verbalization(backend: &Backend, verdict: &SymbolicVerdict, schema: &Schema) -> Result<String, LlmError> {
    let plain = verbalize_verdict(verdict, schema)?;
    let prompt = format!("Rephrase for a non-specialist, keeping the outcome word unchanged:\n{plain}");
    Ok(match backend.generate(&prompt) {
        Ok(text) if text.contains(&verdict.outcome) => text,
        _ => plain,
    })
}
