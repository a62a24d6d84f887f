//! Brute-force reference implementations, written without looking at the
//! library internals: n-grams are plain token vectors counted by linear scan.

#![allow(dead_code)]

pub fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], gram: &[String]) -> usize {
    list.iter().filter(|g| g.as_slice() == gram).count()
}

/// (clipped matches, total candidate n-grams)
pub fn precision(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| ngrams(r, n)).collect();
    let mut seen: Vec<&Vec<String>> = Vec::new();
    let mut clipped = 0;
    for gram in &cand {
        if seen.contains(&gram) {
            continue;
        }
        seen.push(gram);
        let own = occurrences(&cand, gram);
        let mut best = 0;
        for r in &refs {
            best = best.max(occurrences(r, gram));
        }
        clipped += own.min(best);
    }
    (clipped, cand.len())
}

pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    let c = candidate.len();
    if c == 0 {
        return 0.0;
    }
    let order = max_n.min(c);
    let mut geo = 1.0f64;
    for n in 1..=order {
        let (m, t) = precision(candidate, references, n);
        if m == 0 {
            return 0.0;
        }
        geo *= (m as f64 / t as f64).powf(1.0 / order as f64);
    }
    let mut r = references[0].len();
    for reference in references {
        let len = reference.len();
        let d_new = (len as i64 - c as i64).abs();
        let d_old = (r as i64 - c as i64).abs();
        if d_new < d_old || (d_new == d_old && len < r) {
            r = len;
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * geo
}

pub fn self_bleu(items: &[Vec<String>], max_n: usize) -> Vec<f64> {
    if items.len() < 2 {
        return vec![0.0; items.len()];
    }
    (0..items.len())
        .map(|i| {
            let others: Vec<Vec<String>> =
                items.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t.clone()).collect();
            bleu(&items[i], &others, max_n)
        })
        .collect()
}

/// Greedy dedup over token lists: returns the indices kept.
pub fn dedup(items: &[Vec<String>], threshold: f64, max_n: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let best = kept.iter().map(|&k| bleu(item, &[items[k].clone()], max_n)).fold(0.0, f64::max);
        if kept.is_empty() || best < threshold {
            kept.push(i);
        }
    }
    kept
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
