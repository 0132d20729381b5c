use adl_lab::policies::{self, Numeraire, RiskShape, WinnerSlice};
use proptest::prelude::*;

fn book_2_4() -> Vec<WinnerSlice> {
    let e = [10.0, 5.0, 1.0, -3.0, -12.0];
    let w = [8.0, 4.0, 0.5, 0.0, 0.0];
    let score = [4.0, 5.0, 3.0, 1.0, 2.0];
    (0..5)
        .map(|i| WinnerSlice::new(i as u32 + 1, e[i] - w[i], w[i], Numeraire::PnlOnly).with_score(score[i]))
        .collect()
}

fn slices(w: &[f64]) -> Vec<WinnerSlice> {
    w.iter().enumerate().map(|(i, &x)| WinnerSlice::new(i as u32, 0.0, x, Numeraire::PnlOnly)).collect()
}

fn post(book: &[WinnerSlice], seized: &[f64]) -> Vec<f64> {
    let cash: Vec<f64> = book.iter().map(|w| w.cash).collect();
    let pnl: Vec<f64> = book.iter().map(|w| w.pnl).collect();
    policies::post_adl_equity(&cash, &pnl, seized, Numeraire::PnlOnly).unwrap()
}

#[test]
fn queue_and_pro_rata_on_worked_book() {
    let book = book_2_4();
    let q = policies::queue_allocate(&book, 7.5).unwrap();
    assert_eq!(q.haircuts, vec![0.4375, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(post(&book, &q.seized), vec![6.5, 1.0, 1.0, -3.0, -12.0]);

    let pr = policies::pro_rata(&book, 0.5, 15.0).unwrap();
    for (h, want) in pr.haircuts.iter().zip([0.6, 0.6, 0.6, 0.0, 0.0]) {
        assert!((h - want).abs() <= 1e-12);
    }
    for (e, want) in post(&book, &pr.seized).iter().zip([5.2, 2.6, 0.7, -3.0, -12.0]) {
        assert!((e - want).abs() <= 1e-9);
    }
    assert!(policies::validate(&q, &book).ok() && policies::validate(&pr, &book).ok());
}

#[test]
fn protected_cash_shift() {
    let book = book_2_4();
    let q = policies::queue_allocate(&book, 7.5).unwrap();
    let pr = policies::pro_rata(&book, 0.5, 15.0).unwrap();
    let (eq, ep) = (post(&book, &q.seized), post(&book, &pr.seized));
    for i in 0..5 {
        assert!(((eq[i] - ep[i]) - (pr.seized[i] - q.seized[i])).abs() <= 1e-12);
    }
}

#[test]
fn appendix_rap_shares() {
    let e = [1.2613, 5.6214, 0.8397];
    let lambdas = [1.031, 0.925, 1.548];
    let cases = [
        (RiskShape::Linear, [0.164, 0.589, 0.246]),
        (RiskShape::Power { exponent: 2.0 }, [0.155, 0.498, 0.348]),
        (RiskShape::Cvar { threshold: 0.9 }, [0.149, 0.114, 0.737]),
    ];
    for (shape, want) in cases {
        let shares = policies::rap_shares(&e, &policies::rap_weights(&lambdas, shape)).unwrap();
        for (s, w) in shares.iter().zip(want) {
            assert!((s - w).abs() <= 5e-3, "{shape:?}: {shares:?}");
        }
    }
}

#[test]
fn rap_shares_agree_with_allocator_when_uncapped() {
    let e = [1.2613, 5.6214, 0.8397];
    let winners: Vec<WinnerSlice> =
        e.iter().enumerate().map(|(i, &x)| WinnerSlice::new(i as u32, 0.0, x, Numeraire::Equity)).collect();
    let weights = policies::rap_weights(&[1.031, 0.925, 1.548], RiskShape::Linear);
    let alloc = policies::rap_allocate(&winners, &weights, 0.5).unwrap();
    let shares = policies::rap_shares(&e, &weights).unwrap();
    for (x, s) in alloc.seized.iter().zip(shares) {
        assert!((x / 0.5 - s).abs() <= 1e-12);
    }
}

#[test]
fn uniform_shock_perspective_matches_closed_form() {
    // ψ(u) = E[(u + Z)₋] for Z ~ U[−a, a] is (a − u)₊²/(4a) when u ≥ −a.
    let a = 0.2;
    let psi = |u: f64| (a - u).max(0.0).powi(2) / (4.0 * a);
    let rho = policies::perspective_weights(&[10.0], psi).unwrap()[0];
    let n = 200_000;
    let mc: f64 = (0..n)
        .map(|k| {
            let z = -a + 2.0 * a * (k as f64 + 0.5) / n as f64;
            (-(0.1 + z)).max(0.0)
        })
        .sum::<f64>()
        / n as f64;
    assert!((rho - 10.0 * mc).abs() <= 1e-3);
    assert!((policies::g_star(10.0, psi) - rho / 10.0).abs() <= 1e-15);
    assert_eq!(policies::perspective_weights(&[1.0, 3.0], |_| 0.0).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn net_gain_example() {
    assert!((policies::net_solvency_gain(0.08, 10.0, 0.005) - 0.03).abs() <= 1e-15);
}

#[test]
fn uniform_weights_reduce_to_capped_pro_rata() {
    let book: Vec<WinnerSlice> = slices(&[5.0, 3.0, 1.0]).into_iter().map(|w| w.with_cap(0.5)).collect();
    let a = policies::rap_allocate(&book, &[2.0, 2.0, 2.0], 3.0).unwrap();
    let b = policies::capped_pro_rata(&book, 3.0).unwrap();
    for (x, y) in a.haircuts.iter().zip(&b.haircuts) {
        assert!((x - y).abs() <= 1e-12);
    }
}

/// Bisection on the level, the slow reference for the segment walk.
fn bisect_level(w: &[f64], caps: &[f64], weights: &[f64], budget: f64) -> Vec<f64> {
    let spent = |tau: f64| -> f64 { (0..w.len()).map(|i| w[i] * caps[i].min(tau * weights[i])).sum() };
    let (mut lo, mut hi) = (0.0, 1.0);
    while spent(hi) < budget {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spent(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0..w.len()).map(|i| caps[i].min(hi * weights[i])).collect()
}

fn arb_book() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((0.1f64..100.0, 0.05f64..=1.0, 0.1f64..10.0), 1..12)
}

proptest! {
    #[test]
    fn segment_walk_matches_bisection(book in arb_book(), frac in 0.0f64..0.999) {
        let w: Vec<f64> = book.iter().map(|b| b.0).collect();
        let caps: Vec<f64> = book.iter().map(|b| b.1).collect();
        let weights: Vec<f64> = book.iter().map(|b| b.2).collect();
        let capacity: f64 = (0..w.len()).map(|i| w[i] * caps[i]).sum();
        let budget = frac * capacity;
        let wl = policies::water_level(&w, &caps, &weights, budget).unwrap();
        let reference = bisect_level(&w, &caps, &weights, budget);
        for (h, r) in wl.haircuts.iter().zip(&reference) {
            prop_assert!((h - r).abs() <= 1e-9);
        }
        let spent: f64 = (0..w.len()).map(|i| w[i] * wl.haircuts[i]).sum();
        prop_assert!((spent - budget).abs() <= 1e-9 * capacity.max(1.0));
    }

    #[test]
    fn pro_rata_axioms(w in prop::collection::vec(0.1f64..100.0, 2..10), theta in 0.0f64..=1.0,
                       frac in 0.0f64..1.0, scale in 0.01f64..100.0, split in 2usize..=8) {
        let u: f64 = w.iter().sum();
        let deficit = frac * u;
        let book = slices(&w);
        let a = policies::pro_rata(&book, theta, deficit).unwrap();
        let surv = a.survivors(&book);
        for i in 0..w.len() {
            for j in 0..w.len() {
                if w[i] >= w[j] {
                    prop_assert!(surv[i] >= surv[j] - 1e-9);
                }
            }
        }
        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let b = policies::pro_rata(&slices(&scaled), theta, deficit * scale).unwrap();
        for (x, y) in a.haircuts.iter().zip(&b.haircuts) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let mut sybil: Vec<f64> = vec![w[0] / split as f64; split];
        sybil.extend_from_slice(&w[1..]);
        let c = policies::pro_rata(&slices(&sybil), theta, deficit).unwrap();
        let split_total: f64 = c.seized[..split].iter().sum();
        prop_assert!((split_total - a.seized[0]).abs() <= 1e-9 * (1.0 + a.seized[0]));
    }

    #[test]
    fn queue_reverses_survivor_order(w2 in 0.1f64..50.0, gap in 0.1f64..50.0, t in 0.001f64..=1.0) {
        let w1 = w2 + gap;
        let budget = (w1 - w2) + t * w2;
        let book: Vec<WinnerSlice> = slices(&[w1, w2]).into_iter().zip([2.0, 1.0])
            .map(|(w, s)| w.with_score(s)).collect();
        let surv = policies::queue_allocate(&book, budget).unwrap().survivors(&book);
        prop_assert!(surv[0] < surv[1]);
    }

    #[test]
    fn allocators_respect_caps(book in arb_book(), frac in 0.0f64..=1.0) {
        let winners: Vec<WinnerSlice> = book.iter().enumerate()
            .map(|(i, b)| WinnerSlice::new(i as u32, 0.0, b.0, Numeraire::PnlOnly).with_cap(b.1).with_leverage(b.2))
            .collect();
        let budget = frac * policies::capped_capacity(&winners);
        let weights: Vec<f64> = book.iter().map(|b| b.2).collect();
        for alloc in [
            policies::queue_allocate(&winners, budget).unwrap(),
            policies::capped_pro_rata(&winners, budget).unwrap(),
            policies::rap_allocate(&winners, &weights, budget).unwrap(),
        ] {
            let d = policies::validate(&alloc, &winners);
            prop_assert!(d.ok(), "{d:?}");
        }
    }
}
