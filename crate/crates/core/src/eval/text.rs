//! String-similarity metrics.

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 for two empty strings.
pub fn normalized_distance(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / n as f64
    }
}

pub fn one_minus_ned(pred: &str, gt: &str) -> f64 {
    1.0 - normalized_distance(pred, gt)
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Normalized Levenshtein similarity of one answer against its best ground
/// truth, zeroed below `threshold`.
pub fn nls(pred: &str, gts: &[String], threshold: f64) -> f64 {
    let p = fold(pred);
    let best = gts.iter().map(|g| 1.0 - normalized_distance(&p, &fold(g))).fold(0.0, f64::max);
    if best >= threshold {
        best
    } else {
        0.0
    }
}

/// Mean thresholded similarity over `(prediction, accepted answers)` pairs;
/// 0 for no pairs.
pub fn anls(pairs: &[(String, Vec<String>)], threshold: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(p, g)| nls(p, g, threshold)).sum::<f64>() / pairs.len() as f64
}

pub const ANLS_THRESHOLD: f64 = 0.5;
pub const RELAXED_TOLERANCE: f64 = 0.05;

pub(crate) fn number(s: &str) -> Option<f64> {
    let t = s.trim().trim_end_matches('%').replace(',', "");
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Numeric answers within `tol` relative error; otherwise a case-folded
/// exact match.
pub fn relaxed_accuracy(pred: &str, gt: &str, tol: f64) -> bool {
    match (number(pred), number(gt)) {
        (Some(p), Some(g)) if g == 0.0 => p == 0.0,
        (Some(p), Some(g)) => (p - g).abs() <= tol * g.abs(),
        _ => fold(pred) == fold(gt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Full-matrix recurrence over the definitions of the three edits.
    fn oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let keep = if a[i - 1] == b[j - 1] { d[i - 1][j - 1] } else { usize::MAX };
                d[i][j] = keep.min(d[i - 1][j - 1] + 1).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn edit_distance_fixtures() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("hello", "hallo"), 1);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("ä", "a"), 1);
        for (a, b) in [("flaw", "lawn"), ("", ""), ("abc", "cba"), ("intention", "execution")] {
            assert_eq!(levenshtein(a, b), oracle(a, b));
        }
    }

    #[test]
    fn ned_and_anls_fixtures() {
        assert_eq!(one_minus_ned("abc", "abc"), 1.0);
        assert!((one_minus_ned("abc", "abd") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(one_minus_ned("", "abc"), 0.0);
        assert_eq!(one_minus_ned("", ""), 1.0);
        let pair = |p: &str, g: &str| (p.to_string(), vec![g.to_string()]);
        assert_eq!(anls(&[pair("hello", "hello")], 0.5), 1.0);
        assert!((anls(&[pair("hallo", "hello")], 0.5) - 0.8).abs() < 1e-12);
        assert_eq!(anls(&[pair("xyz", "hello")], 0.5), 0.0);
        assert_eq!(anls(&[pair(" Hello ", "hello")], 0.5), 1.0);
        assert!((anls(&[pair("hallo", "hello"), pair("xyz", "hello")], 0.5) - 0.4).abs() < 1e-12);
        let multi = ("abc".to_string(), vec!["zzz".to_string(), "abd".to_string()]);
        assert!((anls(&[multi], 0.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relaxed_accuracy_fixtures() {
        assert!(relaxed_accuracy("104", "100", 0.05));
        assert!(!relaxed_accuracy("106", "100", 0.05));
        assert!(relaxed_accuracy("Paris", "paris", 0.05));
        assert!(relaxed_accuracy("0", "0", 0.05));
        assert!(!relaxed_accuracy("0.01", "0", 0.05));
        assert!(!relaxed_accuracy("abc", "100", 0.05));
    }
}
