//! Response parsing: reasoning traces, listwise permutations, yes/no logits.

use crate::error::{BackendError, Error, Result};

/// Split `<think> ... </think> summary` into its two parts.
pub fn parse_ecr_text(backend_id: &str, raw: &str) -> Result<(String, String), BackendError> {
    let fail = |reason: &str| BackendError::Parse {
        backend_id: backend_id.to_string(),
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let open = raw.find("<think>").ok_or_else(|| fail("missing <think>"))?;
    let body_start = open + "<think>".len();
    let close_rel = raw[body_start..]
        .find("</think>")
        .ok_or_else(|| fail("missing </think>"))?;
    let think = raw[body_start..body_start + close_rel].trim();
    let summary = raw[body_start + close_rel + "</think>".len()..].trim();
    if summary.is_empty() {
        return Err(fail("empty summary after </think>"));
    }
    Ok((think.to_string(), summary.to_string()))
}

/// Repair a listwise ranking response into a 1-based permutation of `1..=n`.
///
/// Integer tokens are read in order; out-of-range and repeated indices are
/// dropped (first occurrence wins) and any index never mentioned is appended
/// in ascending order.
pub fn parse_listwise_response(raw: &str, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidInput("listwise n must be at least 1".into()));
    }
    let mut seen = vec![false; n + 1];
    let mut order = Vec::with_capacity(n);
    for token in raw
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
    {
        // overflowing tokens are out of range by definition
        let Ok(idx) = token.parse::<usize>() else {
            continue;
        };
        if (1..=n).contains(&idx) && !seen[idx] {
            seen[idx] = true;
            order.push(idx);
        }
    }
    if order.is_empty() {
        return Err(Error::Backend(BackendError::Parse {
            backend_id: String::new(),
            reason: format!("no index in 1..={n} found"),
            raw: raw.to_string(),
        }));
    }
    order.extend((1..=n).filter(|&i| !seen[i]));
    Ok(order)
}

/// Probability of "yes" from the yes/no token logits, `e^y / (e^y + e^n)`,
/// evaluated as a logistic of the difference.
pub fn mllm_zero_shot_score(logit_yes: f64, logit_no: f64) -> Result<f64> {
    if !logit_yes.is_finite() || !logit_no.is_finite() {
        return Err(Error::InvalidInput(format!(
            "logits must be finite, got yes={logit_yes} no={logit_no}"
        )));
    }
    let d = logit_yes - logit_no;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ecr_text_split() {
        let (t, s) = parse_ecr_text("b", "<think>x</think> y").unwrap();
        assert_eq!((t.as_str(), s.as_str()), ("x", "y"));
        let err = parse_ecr_text("b", "just a summary").unwrap_err();
        assert!(matches!(err, BackendError::Parse { ref raw, .. } if raw == "just a summary"));
        assert!(parse_ecr_text("b", "<think>x</think>   ").is_err());
    }

    #[test]
    fn listwise_repair_rule() {
        assert_eq!(
            parse_listwise_response("2, 2, 5, 1", 3).unwrap(),
            vec![2, 1, 3]
        );
        assert_eq!(parse_listwise_response("1 2 3", 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(
            parse_listwise_response("3, 1, 2", 3).unwrap(),
            vec![3, 1, 2]
        );
        assert_eq!(parse_listwise_response("[1]", 1).unwrap(), vec![1]);
        assert!(parse_listwise_response("none of them", 3).is_err());
        assert!(parse_listwise_response("0 4 99999999999999999999999", 3).is_err());
        assert!(parse_listwise_response("1", 0).is_err());
    }

    #[test]
    fn zero_shot_values() {
        assert!((mllm_zero_shot_score(1.3, 1.3).unwrap() - 0.5).abs() < 1e-12);
        assert!(mllm_zero_shot_score(20.0, 0.0).unwrap() >= 0.999999);
        assert!(mllm_zero_shot_score(f64::NAN, 0.0).is_err());
        assert!(mllm_zero_shot_score(0.0, f64::INFINITY).is_err());
        // extreme differences stay inside [0, 1] without overflow
        assert_eq!(mllm_zero_shot_score(-1e308, 1e308).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn listwise_output_is_permutation(raw in ".{0,60}", n in 1usize..40) {
            if let Ok(p) = parse_listwise_response(&raw, n) {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (1..=n).collect::<Vec<_>>());
            }
        }
    }
}
