//! Stage-level auction: bid collection within a window, deterministic
//! winner selection, and the hand-tuned heuristic bidder used to collect
//! offline data.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::HeuristicCoefficients;
use crate::domain::{AvailabilityMask, BidBounds, Observation, RobotId, StageContext};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidSet {
    /// Bid per roster slot; masked-out slots carry `f64::INFINITY`.
    pub bids: Vec<f64>,
    pub mask: AvailabilityMask,
    pub stage: StageContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub winner_id: RobotId,
    pub winning_bid: f64,
    pub responded: BTreeSet<RobotId>,
}

/// A robot's reachability for one auction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Responder {
    pub online: bool,
    /// Sampled response latency to the host; `None` when unreachable.
    pub response_ms: Option<f64>,
}

/// Solicit bids from every robot that is online and answers within
/// `bid_window_ms`. The bidder is only called for responding slots.
pub fn collect_bids<F>(
    stage: &StageContext,
    responders: &[Responder],
    bid_window_ms: f64,
    bounds: &BidBounds,
    mut bidder: F,
) -> Result<BidSet>
where
    F: FnMut(RobotId) -> Result<f64>,
{
    if !responders.iter().any(|r| r.online) {
        return Err(Error::AuctionFailed);
    }
    let mut bids = vec![f64::INFINITY; responders.len()];
    let mut available = vec![false; responders.len()];
    for (slot, r) in responders.iter().enumerate() {
        let in_window = matches!(r.response_ms, Some(ms) if ms <= bid_window_ms);
        if r.online && in_window {
            available[slot] = true;
            bids[slot] = bounds.clip_bid(bidder(slot)?)?;
        }
    }
    if !available.iter().any(|&a| a) {
        return Err(Error::AuctionFailed);
    }
    Ok(BidSet { bids, mask: AvailabilityMask { available }, stage: stage.clone() })
}

/// Lowest masked-in bid wins; ties go to the lowest robot id.
pub fn select_winner(bid_set: &BidSet) -> Result<AuctionOutcome> {
    let mut best: Option<(RobotId, f64)> = None;
    let mut responded = BTreeSet::new();
    for (slot, (&bid, &ok)) in bid_set.bids.iter().zip(&bid_set.mask.available).enumerate() {
        if !ok {
            continue;
        }
        if bid.is_nan() {
            return Err(Error::InvalidInput(format!("bid of slot {slot} is NaN")));
        }
        responded.insert(slot);
        match best {
            Some((_, b)) if bid >= b => {}
            _ => best = Some((slot, bid)),
        }
    }
    let (winner_id, winning_bid) = best.ok_or(Error::AuctionFailed)?;
    Ok(AuctionOutcome { winner_id, winning_bid, responded })
}

/// Linear cost over raw telemetry; lower means more willing to execute.
pub fn heuristic_bid(obs: &Observation, k: &HeuristicCoefficients, bounds: &BidBounds) -> Result<f64> {
    let t = &obs.telemetry;
    let raw = k.k_q * t.queue as f64
        + k.k_s * (1.0 - t.soc)
        + k.k_r * obs.network.rtt_to_host
        + k.k_g * t.gpu
        + k.k_c * t.cpu;
    bounds.clip_bid(raw)
}

/// Concurrency level (index into `CAPACITY_LEVELS`) the heuristic declares.
pub fn heuristic_capacity(obs: &Observation) -> usize {
    let t = &obs.telemetry;
    if t.soc < 0.2 || t.queue > 2 {
        0
    } else if t.queue > 0 {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FeatureScales, NetworkSummary, ObservationBuilder, ResourceTelemetry, StageKind};
    use proptest::prelude::*;

    fn stage() -> StageContext {
        StageContext::new(StageKind::SamA, 300.0, 1e5)
    }

    fn bidset(bids: Vec<f64>, mask: Vec<bool>) -> BidSet {
        BidSet { bids, mask: AvailabilityMask { available: mask }, stage: stage() }
    }

    fn obs(queue: u32, soc: f64, rtt: f64, gpu: f64, cpu: f64) -> Observation {
        let t = ResourceTelemetry { battery_horizon: 1000.0, soc, power: 50.0, temp: 40.0, cpu, gpu, ram: 0.3, queue };
        let n = NetworkSummary { rssi: -50.0, rtt_to_host: rtt, rtt_min: rtt, rtt_mean: rtt };
        ObservationBuilder::new(FeatureScales::default(), 3).build(&t, &n, &stage(), 0, 0).unwrap()
    }

    #[test]
    fn argmin_and_tie_break_and_mask() {
        assert_eq!(select_winner(&bidset(vec![3.2, 1.1, 5.0], vec![true; 3])).unwrap().winner_id, 1);
        assert_eq!(select_winner(&bidset(vec![2.0, 2.0], vec![true; 2])).unwrap().winner_id, 0);
        let out = select_winner(&bidset(vec![3.2, 1.1, 5.0], vec![true, false, true])).unwrap();
        assert_eq!(out.winner_id, 0);
        assert_eq!(out.winning_bid, 3.2);
        assert_eq!(out.responded, BTreeSet::from([0, 2]));
    }

    #[test]
    fn empty_mask_fails() {
        assert!(matches!(select_winner(&bidset(vec![1.0], vec![false])), Err(Error::AuctionFailed)));
    }

    #[test]
    fn window_masks_slow_responders() {
        let b = BidBounds::default();
        let rs = [
            Responder { online: true, response_ms: Some(0.0) },
            Responder { online: true, response_ms: Some(250.0) },
            Responder { online: true, response_ms: Some(20.0) },
        ];
        let set = collect_bids(&stage(), &rs, 200.0, &b, |_| Ok(10.0)).unwrap();
        assert_eq!(set.mask.available, vec![true, false, true]);
        let all = collect_bids(&stage(), &rs, f64::INFINITY, &b, |_| Ok(10.0)).unwrap();
        assert_eq!(all.mask.available, vec![true; 3]);
    }

    #[test]
    fn offline_and_unreachable_are_masked() {
        let b = BidBounds::default();
        let rs = [
            Responder { online: true, response_ms: Some(0.0) },
            Responder { online: false, response_ms: Some(1.0) },
            Responder { online: true, response_ms: None },
        ];
        let set = collect_bids(&stage(), &rs, 200.0, &b, |_| Ok(10.0)).unwrap();
        assert_eq!(set.mask.available, vec![true, false, false]);
        let none = [Responder { online: false, response_ms: Some(0.0) }];
        assert!(matches!(collect_bids(&stage(), &none, 200.0, &b, |_| Ok(1.0)), Err(Error::AuctionFailed)));
    }

    #[test]
    fn collected_bids_are_clipped() {
        let rs = [Responder { online: true, response_ms: Some(0.0) }; 2];
        let set = collect_bids(&stage(), &rs, 200.0, &BidBounds::default(), |s| Ok(if s == 0 { -3.0 } else { 900.0 })).unwrap();
        assert_eq!(set.bids, vec![0.0, 400.0]);
    }

    #[test]
    fn heuristic_examples() {
        let k = HeuristicCoefficients::default();
        let b = BidBounds::default();
        let idle = heuristic_bid(&obs(0, 1.0, 0.0, 0.0, 0.0), &k, &b).unwrap();
        assert_eq!(idle, 0.0);
        let loaded = heuristic_bid(&obs(3, 1.0, 0.0, 0.0, 0.0), &k, &b).unwrap();
        assert!(idle < loaded);
        // 50*2 + 100*0.3 + 0.5*12 + 80*0.5 + 40*0.25 = 100 + 30 + 6 + 40 + 10
        let a = heuristic_bid(&obs(2, 0.7, 12.0, 0.5, 0.25), &k, &b).unwrap();
        assert!((a - 186.0).abs() < 1e-12);
        // 50*1 + 100*0.1 + 0.5*30 + 80*0.9 + 40*0.6 = 50 + 10 + 15 + 72 + 24
        let c = heuristic_bid(&obs(1, 0.9, 30.0, 0.9, 0.6), &k, &b).unwrap();
        assert!((c - 171.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shift_and_mask_invariance(
            bids in proptest::collection::vec(0.0f64..400.0, 1..6),
            mask_bits in proptest::collection::vec(any::<bool>(), 6),
            shift in -100.0f64..100.0,
        ) {
            let n = bids.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let set = bidset(bids.clone(), mask.clone());
            let w = select_winner(&set).unwrap().winner_id;
            let shifted = bidset(bids.iter().map(|b| b + shift).collect(), mask.clone());
            prop_assert_eq!(select_winner(&shifted).unwrap().winner_id, w);
            for other in 0..n {
                if other != w && mask[other] {
                    let mut m = mask.clone();
                    m[other] = false;
                    prop_assert_eq!(select_winner(&bidset(bids.clone(), m)).unwrap().winner_id, w);
                }
            }
            prop_assert_eq!(select_winner(&set).unwrap(), select_winner(&set).unwrap());
        }

        #[test]
        fn heuristic_is_monotone(q in 0u32..5, soc in 0.05f64..1.0, rtt in 0.0f64..100.0, g in 0.0f64..0.9, c in 0.0f64..0.9) {
            let k = HeuristicCoefficients::default();
            let b = BidBounds::default();
            let base = heuristic_bid(&obs(q, soc, rtt, g, c), &k, &b).unwrap();
            prop_assert!(heuristic_bid(&obs(q + 1, soc, rtt, g, c), &k, &b).unwrap() >= base);
            prop_assert!(heuristic_bid(&obs(q, soc - 0.05, rtt, g, c), &k, &b).unwrap() >= base);
            prop_assert!(heuristic_bid(&obs(q, soc, rtt + 5.0, g, c), &k, &b).unwrap() >= base);
            prop_assert!(heuristic_bid(&obs(q, soc, rtt, g + 0.1, c), &k, &b).unwrap() >= base);
            prop_assert!(heuristic_bid(&obs(q, soc, rtt, g, c + 0.1), &k, &b).unwrap() >= base);
        }
    }
}
