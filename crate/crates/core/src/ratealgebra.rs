//! Multi-Poisson observation probabilities over exclusive detector combinations.

use crate::combination::{Combination, LabelSet};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Largest supported expansion order.
pub const MAX_ORDER: u32 = 4;

/// Expected occurrences per window for each nonempty exclusive combination.
pub type Lambdas = Vec<(Combination, f64)>;

/// One multiset of occurrences with its Poisson weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    /// (combination, multiplicity) with multiplicity ≥ 1.
    pub counts: Vec<(Combination, u32)>,
    pub weight: f64,
}

impl Term {
    pub fn multiplicity(&self) -> u32 {
        self.counts.iter().map(|c| c.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermExpansion {
    pub order: u32,
    pub lambda_total: f64,
    pub terms: Vec<Term>,
}

impl TermExpansion {
    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    /// Upper bound on the weight of omitted terms: Λ^(K+1)/(K+1)!.
    pub fn tail_bound(&self) -> f64 {
        let k = self.order + 1;
        self.lambda_total.powi(k as i32) / (1..=k).map(f64::from).product::<f64>()
    }
}

fn check(lambdas: &Lambdas, order: u32) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::domain(format!("order must lie in 1..={MAX_ORDER}, got {order}")));
    }
    for &(c, l) in lambdas {
        if c.is_empty() {
            return Err(Error::domain("the empty combination carries no occurrences"));
        }
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::domain("occurrence means must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// All multisets with total multiplicity ≤ `order`, weighted by Π Pois(λ_α; n_α).
pub fn expand(lambdas: &Lambdas, order: u32) -> Result<TermExpansion> {
    check(lambdas, order)?;
    let total: f64 = lambdas.iter().map(|l| l.1).sum();
    let base = (-total).exp();
    let mut terms = Vec::new();
    let mut stack: Vec<(Combination, u32)> = Vec::new();
    fn rec(lambdas: &Lambdas, i: usize, left: u32, weight: f64, stack: &mut Vec<(Combination, u32)>, out: &mut Vec<Term>) {
        if i == lambdas.len() {
            out.push(Term { counts: stack.clone(), weight });
            return;
        }
        let (c, l) = lambdas[i];
        rec(lambdas, i + 1, left, weight, stack, out);
        let mut w = weight;
        for n in 1..=left {
            w *= l / n as f64;
            stack.push((c, n));
            rec(lambdas, i + 1, left - n, w, stack, out);
            stack.pop();
        }
    }
    rec(lambdas, 0, order, base, &mut stack, &mut terms);
    Ok(TermExpansion { order, lambda_total: total, terms })
}

/// Distribution of the detected subset for one occurrence of `c`.
fn detected_subsets(c: Combination, eff: &[f64]) -> Vec<(Combination, f64)> {
    c.subsets()
        .map(|d| {
            let p: f64 = c.indices().map(|k| if d.contains(k) { eff[k] } else { 1.0 - eff[k] }).product();
            (d, p)
        })
        .filter(|x| x.1 > 0.0)
        .collect()
}

/// Probability that the union of detected labels in `term` equals `target`.
pub fn term_observation(term: &Term, target: Combination, eff: &[f64]) -> f64 {
    let mut dist: BTreeMap<Combination, f64> = BTreeMap::new();
    dist.insert(Combination::EMPTY, 1.0);
    for &(c, n) in &term.counts {
        let subs = detected_subsets(c, eff);
        for _ in 0..n {
            let mut next = BTreeMap::new();
            for (&u, &p) in &dist {
                for &(d, q) in &subs {
                    let v = u.union(d);
                    if v.is_subset_of(target) {
                        *next.entry(v).or_insert(0.0) += p * q;
                    }
                }
            }
            dist = next;
        }
    }
    dist.get(&target).copied().unwrap_or(0.0)
}

fn eff_vec(eff: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    let mut v = vec![0.0; crate::combination::MAX_LABELS];
    for (&k, &e) in eff {
        if !(0.0..=1.0).contains(&e) || k >= v.len() {
            return Err(Error::domain("efficiencies must lie in [0, 1]"));
        }
        v[k] = e;
    }
    Ok(v)
}

/// Probability of observing exactly `target` within one window, to `order`.
pub fn observation_probability(target: Combination, lambdas: &Lambdas, eff: &BTreeMap<usize, f64>, order: u32) -> Result<f64> {
    let exp = expand(lambdas, order)?;
    let e = eff_vec(eff)?;
    Ok(exp.terms.iter().map(|t| t.weight * term_observation(t, target, &e)).sum())
}

/// Leading-order probability: one occurrence producing exactly `target`.
pub fn first_order_probability(target: Combination, lambdas: &Lambdas, eff: &BTreeMap<usize, f64>) -> Result<f64> {
    check(lambdas, 1)?;
    let e = eff_vec(eff)?;
    if target.is_empty() {
        let observed: f64 = lambdas.iter().map(|&(c, l)| l * (1.0 - c.indices().map(|k| 1.0 - e[k]).product::<f64>())).sum();
        return Ok(1.0 - observed);
    }
    Ok(lambdas
        .iter()
        .filter(|(c, _)| target.is_subset_of(*c))
        .map(|&(c, l)| l * c.indices().map(|k| if target.contains(k) { e[k] } else { 1.0 - e[k] }).product::<f64>())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub target: Combination,
    pub first_order: f64,
    pub order3: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

/// Compare first-order and order-3 probabilities for every reachable target.
pub fn first_order_check(lambdas: &Lambdas, eff: &BTreeMap<usize, f64>) -> Result<Vec<GapRow>> {
    let exp = expand(lambdas, 3)?;
    let e = eff_vec(eff)?;
    let reach = lambdas.iter().fold(Combination::EMPTY, |u, l| u.union(l.0));
    let mut rows = Vec::new();
    for target in reach.subsets() {
        let o3: f64 = exp.terms.iter().map(|t| t.weight * term_observation(t, target, &e)).sum();
        let f1 = first_order_probability(target, lambdas, eff)?;
        if o3 == 0.0 && f1 == 0.0 {
            continue;
        }
        let abs_gap = (o3 - f1).abs();
        let rel_gap = if o3 > 0.0 { abs_gap / o3 } else { 0.0 };
        rows.push(GapRow { target, first_order: f1, order3: o3, abs_gap, rel_gap });
    }
    Ok(rows)
}

/// One row of a term-by-term breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownRow {
    pub term: Term,
    pub p_observe: f64,
    pub contribution: f64,
}

/// Terms contributing to observing `target`, largest first.
pub fn breakdown(target: Combination, lambdas: &Lambdas, eff: &BTreeMap<usize, f64>, order: u32) -> Result<Vec<BreakdownRow>> {
    let exp = expand(lambdas, order)?;
    let e = eff_vec(eff)?;
    let mut rows: Vec<BreakdownRow> = exp
        .terms
        .into_iter()
        .map(|t| {
            let p = term_observation(&t, target, &e);
            let contribution = p * t.weight;
            BreakdownRow { term: t, p_observe: p, contribution }
        })
        .filter(|r| r.contribution > 0.0)
        .collect();
    rows.sort_by(|a, b| b.contribution.total_cmp(&a.contribution));
    Ok(rows)
}

/// Format a term as `AB*×2 + C*`.
pub fn format_term(t: &Term, labels: &LabelSet) -> String {
    if t.counts.is_empty() {
        return "(none)".into();
    }
    t.counts
        .iter()
        .map(|&(c, n)| if n == 1 { format!("{}*", labels.format(c)) } else { format!("{}*x{}", labels.format(c), n) })
        .collect::<Vec<_>>()
        .join(" + ")
}

/// Parsed rate-algebra query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub labels: LabelSet,
    pub lambdas: Lambdas,
    pub efficiencies: BTreeMap<usize, f64>,
    pub target: Combination,
    pub order: u32,
}

/// Parse the small text format:
///
/// ```text
/// labels A B
/// lambda A 1e-3
/// lambda AB 2e-4
/// eff A 0.9
/// target AB
/// order 2
/// ```
pub fn parse_query(text: &str) -> Result<Query> {
    let mut labels: Option<LabelSet> = None;
    let mut raw_l = Vec::new();
    let mut raw_e = Vec::new();
    let mut target = None;
    let mut order = 1;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::config(format!("line {}: cannot parse `{line}`", n + 1));
        match parts[0] {
            "labels" => labels = Some(LabelSet::new(parts[1..].iter().copied())?),
            "lambda" if parts.len() == 3 => raw_l.push((parts[1].to_string(), parts[2].parse::<f64>().map_err(|_| bad())?)),
            "eff" if parts.len() == 3 => raw_e.push((parts[1].to_string(), parts[2].parse::<f64>().map_err(|_| bad())?)),
            "target" if parts.len() == 2 => target = Some(parts[1].to_string()),
            "order" if parts.len() == 2 => order = parts[1].parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    let labels = labels.ok_or_else(|| Error::config("missing `labels` line"))?;
    let mut lambdas = Vec::new();
    for (c, l) in raw_l {
        lambdas.push((labels.parse(c.trim_end_matches('*'))?, l));
    }
    let mut efficiencies = BTreeMap::new();
    for (k, e) in raw_e {
        let i = labels.index_of(&k).ok_or_else(|| Error::config(format!("unknown label `{k}`")))?;
        efficiencies.insert(i, e);
    }
    let target = labels.parse(target.as_deref().ok_or_else(|| Error::config("missing `target` line"))?.trim_end_matches('*'))?;
    Ok(Query { labels, lambdas, efficiencies, target, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: Combination = Combination(1);
    const B: Combination = Combination(2);
    const AB: Combination = Combination(3);

    fn effs(a: f64, b: f64) -> BTreeMap<usize, f64> {
        BTreeMap::from([(0, a), (1, b)])
    }

    /// Inclusion–exclusion over thinned independent Poisson processes, all orders.
    fn exact(target: Combination, lambdas: &Lambdas, eff: &BTreeMap<usize, f64>) -> f64 {
        let e = eff_vec(eff).unwrap();
        let mut thinned: BTreeMap<Combination, f64> = BTreeMap::new();
        for &(c, l) in lambdas {
            for (d, q) in detected_subsets(c, &e) {
                if !d.is_empty() {
                    *thinned.entry(d).or_default() += l * q;
                }
            }
        }
        target
            .subsets()
            .map(|s| {
                let sign = if (target.len() - s.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
                let out: f64 = thinned.iter().filter(|(d, _)| !d.is_subset_of(s)).map(|(_, &l)| l).sum();
                sign * (-out).exp()
            })
            .sum()
    }

    #[test]
    fn single_combination_order_one() {
        let x = expand(&vec![(A, 0.1)], 1).unwrap();
        assert_eq!(x.terms.len(), 2);
        let w: Vec<f64> = x.terms.iter().map(|t| t.weight).collect();
        assert!((w[0] - (-0.1f64).exp()).abs() < 1e-15);
        assert!((w[1] - 0.1 * (-0.1f64).exp()).abs() < 1e-15);
        assert!(expand(&vec![(A, 0.1)], 5).is_err());
        assert!(expand(&vec![(A, 0.1)], 0).is_err());
    }

    #[test]
    fn weights_factorise() {
        let x = expand(&vec![(A, 0.2), (B, 0.3)], 2).unwrap();
        for t in &x.terms {
            let n = |c| t.counts.iter().find(|x| x.0 == c).map(|x| x.1).unwrap_or(0);
            let pois = |l: f64, k: u32| (-l).exp() * l.powi(k as i32) / (1..=k).map(f64::from).product::<f64>();
            assert!((t.weight - pois(0.2, n(A)) * pois(0.3, n(B))).abs() < 1e-15);
        }
    }

    #[test]
    fn ab_exclusive_leading_term() {
        let l = vec![(A, 1e-3), (B, 2e-3), (AB, 5e-4)];
        let p = observation_probability(AB, &l, &effs(0.9, 0.8), 1).unwrap();
        let tot: f64 = 3.5e-3;
        assert!((p - 0.9 * 0.8 * 5e-4 * (-tot).exp()).abs() < 1e-15);
    }

    #[test]
    fn order_two_hand_expansion() {
        let (la, lb, lab) = (1e-2, 2e-2, 5e-3);
        let l = vec![(A, la), (B, lb), (AB, lab)];
        let (ea, eb) = (0.9, 0.8);
        let p = observation_probability(AB, &l, &effs(ea, eb), 2).unwrap();
        let z = (-(la + lb + lab)).exp();
        let one = ea * eb * lab;
        // A*+AB* detail: A* contributes {A} w.p. ea or nothing; AB* must supply the rest.
        let a_plus_ab = la * lab * (ea * (ea * eb + (1.0 - ea) * eb) + (1.0 - ea) * ea * eb);
        let b_plus_ab = lb * lab * (eb * (ea * eb + ea * (1.0 - eb)) + (1.0 - eb) * ea * eb);
        let q_ab = ea * eb;
        let q_a = ea * (1.0 - eb);
        let q_b = (1.0 - ea) * eb;
        let q_0 = (1.0 - ea) * (1.0 - eb);
        let ab_twice = lab * lab / 2.0 * (q_ab * q_ab + 2.0 * q_ab * (q_a + q_b + q_0) + 2.0 * q_a * q_b);
        let expect = z * (one + la * lb * ea * eb + a_plus_ab + b_plus_ab + ab_twice);
        assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
    }

    #[test]
    fn zero_efficiency_only_empty() {
        let l = vec![(A, 1e-2), (AB, 1e-2)];
        let e = effs(0.0, 0.0);
        assert_eq!(observation_probability(A, &l, &e, 3).unwrap(), 0.0);
        assert_eq!(observation_probability(AB, &l, &e, 3).unwrap(), 0.0);
        let p0 = observation_probability(Combination::EMPTY, &l, &e, 3).unwrap();
        let x = expand(&l, 3).unwrap();
        assert!((p0 - x.total_weight()).abs() < 1e-15);
    }

    #[test]
    fn small_lambda_gap() {
        let l = vec![(A, 1e-3), (B, 8e-4), (AB, 3e-4)];
        let rows = first_order_check(&l, &effs(0.95, 0.9)).unwrap();
        for r in rows.iter().filter(|r| !r.target.is_empty()) {
            assert!(r.rel_gap < 5e-3, "{r:?}");
        }
        let zero = first_order_check(&vec![(A, 0.0)], &effs(1.0, 1.0)).unwrap();
        assert!(zero.iter().all(|r| r.abs_gap == 0.0));
    }

    #[test]
    fn query_parsing() {
        let q = parse_query("labels A B\nlambda A 1e-3\nlambda AB* 2e-4\neff A 0.9\neff B 0.8\ntarget AB\norder 2\n").unwrap();
        assert_eq!(q.target, AB);
        assert_eq!(q.order, 2);
        assert_eq!(q.lambdas.len(), 2);
        assert!(parse_query("labels A\ntarget Z").is_err());
    }

    proptest! {
        #[test]
        fn matches_exact_within_tail(la in 0.0..0.05f64, lb in 0.0..0.05f64, lab in 0.0..0.05f64,
                                     ea in 0.0..=1.0f64, eb in 0.0..=1.0f64, order in 1u32..=4) {
            let l = vec![(A, la), (B, lb), (AB, lab)];
            let e = effs(ea, eb);
            let x = expand(&l, order).unwrap();
            let mut sum = 0.0;
            for t in [Combination::EMPTY, A, B, AB] {
                let p = observation_probability(t, &l, &e, order).unwrap();
                let ex = exact(t, &l, &e);
                prop_assert!(p <= ex + 1e-15);
                prop_assert!(ex - p <= x.tail_bound() + 1e-15);
                sum += p;
            }
            prop_assert!(sum <= 1.0 + 1e-12);
            prop_assert!(sum + x.tail_bound() >= 1.0 - 1e-12);
        }

        #[test]
        fn monotone_in_efficiency(ea in 0.0..0.9f64, d in 0.0..0.1f64, eb in 0.0..=1.0f64) {
            let l = vec![(A, 1e-2), (AB, 2e-2), (B, 1e-2)];
            let p1 = observation_probability(AB, &l, &effs(ea, eb), 3).unwrap();
            let p2 = observation_probability(AB, &l, &effs(ea + d, eb), 3).unwrap();
            prop_assert!(p2 >= p1 - 1e-15);
        }
    }
}
