//! Synthetic hit logs with planted intents.
//!
//! The site is a layered drill-down catalogue: a home page links to section
//! hubs, each hub to the goal reports of its section and to one overview
//! page per goal, each overview to its goal and to two detail pages, and each detail page to the
//! same goal (sometimes also to a second goal of the section). Links only point one layer down,
//! so the site is acyclic.
//!
//! Each user owns a few goal reports (their intents, mostly from one section)
//! and an experience level
//! that scales how many sessions they produce. A session picks one intent,
//! starts at home or at the intent's section hub and walks down, taking a step toward the
//! intent with probability `intent_bias` and a habitual step otherwise. A
//! user who reaches the goal (or a dead end) keeps reloading it, quickly,
//! for the rest of the session. Every view carries a short series whose shape is
//! `ρ·pattern(intent) + (1 − ρ)·noise`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HitRecord, ReportKind};

const DAY: u64 = 86_400;
/// Chance that a focused step follows the intent's favourite route.
const ROUTE_LOYALTY: f64 = 0.9;
/// Chance that a session starts on the home page rather than a hub.
const HOME_ENTRY: f64 = 0.7;
const DETAILS_PER_OVERVIEW: usize = 2;
const WORKDAY_START: u64 = 9 * 3600;
const WORKDAY_LENGTH: u64 = 8 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    /// Approximate catalogue size; rounded to whole sections.
    pub n_reports: usize,
    pub n_clusters: usize,
    /// Sessions of a user at average experience.
    pub sessions_per_user: usize,
    /// Mean of the geometric session length (hits).
    pub mean_session_length: f64,
    pub intent_count: usize,
    /// ρ: 0 gives pure-noise report values, 1 values fully set by the intent.
    pub context_signal_strength: f64,
    pub seed: u64,
    pub goals_per_section: usize,
    /// Chance that a detail page also links to another goal of its section.
    pub cross_link_probability: f64,
    pub n_metrics: usize,
    pub n_elements: usize,
    /// Observations per report view.
    pub series_length: usize,
    pub histogram_fraction: f64,
    /// Probability that a step heads toward the session intent.
    pub intent_bias: f64,
    pub days: u64,
    /// Mean dwell between hits, seconds.
    pub mean_dwell: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_reports: 53,
            n_clusters: 4,
            sessions_per_user: 10,
            mean_session_length: 7.0,
            intent_count: 3,
            context_signal_strength: 0.8,
            seed: 0,
            goals_per_section: 3,
            cross_link_probability: 0.25,
            n_metrics: 1,
            n_elements: 1,
            series_length: 8,
            histogram_fraction: 0.1,
            intent_bias: 1.0,
            days: 10,
            mean_dwell: 60.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_clusters", self.n_clusters),
            ("sessions_per_user", self.sessions_per_user),
            ("intent_count", self.intent_count),
            ("goals_per_section", self.goals_per_section),
            ("n_metrics", self.n_metrics),
            ("n_elements", self.n_elements),
            ("series_length", self.series_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::argument(format!("{name} must be at least 1")));
        }
        if self.days == 0 {
            return Err(Error::argument("days must be at least 1"));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.context_signal_strength) {
            return Err(Error::argument(
                "context_signal_strength must lie in [0, 1]",
            ));
        }
        if !unit(self.histogram_fraction)
            || !unit(self.intent_bias)
            || !unit(self.cross_link_probability)
        {
            return Err(Error::argument(
                "histogram_fraction, intent_bias and cross_link_probability must lie in [0, 1]",
            ));
        }
        if !(self.mean_session_length >= 1.0) || !(self.mean_dwell > 0.0) {
            return Err(Error::argument(
                "mean_session_length must be >= 1 and mean_dwell > 0",
            ));
        }
        if self.n_sections() == 0 {
            return Err(Error::argument(format!(
                "n_reports must be at least {} (home plus one section)",
                1 + self.section_size()
            )));
        }
        if self.intent_count > self.n_sections() * self.goals_per_section {
            return Err(Error::argument(
                "intent_count exceeds the number of goal reports",
            ));
        }
        Ok(())
    }

    /// Hub, overviews, detail pages and goals of one section.
    fn section_size(&self) -> usize {
        1 + self.goals_per_section * (2 + DETAILS_PER_OVERVIEW)
    }

    /// Whole sections that fit in `n_reports` after the home page.
    pub fn n_sections(&self) -> usize {
        self.n_reports.saturating_sub(1) / self.section_size()
    }

    /// Sessions generated for a user of the given experience level.
    pub fn sessions_for_level(&self, level: usize) -> usize {
        let scale = if self.n_clusters == 1 {
            1.0
        } else {
            0.5 + level as f64 / (self.n_clusters - 1) as f64
        };
        ((self.sessions_per_user as f64 * scale).round() as usize).max(1)
    }

    /// Mean and standard deviation of the length of one session.
    pub fn session_length_moments(&self) -> (f64, f64) {
        let p = 1.0 / self.mean_session_length;
        (self.mean_session_length, ((1.0 - p) / (p * p)).sqrt())
    }
}

#[derive(Debug, Clone)]
struct Report {
    id: String,
    kind: ReportKind,
    metric: String,
    element: String,
    children: Vec<usize>,
}

/// Value profile of one goal report.
#[derive(Debug, Clone)]
struct Pattern {
    level: f64,
    peak: f64,
    amplitude: f64,
    slope: f64,
}

impl Pattern {
    fn value(&self, i: usize) -> f64 {
        let x = i as f64;
        self.level + self.slope * x + self.amplitude * (-(x - self.peak).powi(2) / 2.0).exp()
    }
}

/// The shared report catalogue.
#[derive(Debug, Clone)]
pub struct Site {
    reports: Vec<Report>,
    goals: Vec<usize>,
    hubs: Vec<usize>,
    patterns: Vec<Pattern>,
    /// `reaches[i]` = goal indices reachable from report `i`.
    reaches: Vec<BTreeSet<usize>>,
}

impl Site {
    pub fn report_ids(&self) -> impl Iterator<Item = &str> {
        self.reports.iter().map(|r| r.id.as_str())
    }

    pub fn goal_ids(&self) -> impl Iterator<Item = &str> {
        self.goals.iter().map(|&g| self.reports[g].id.as_str())
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

fn build_site(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Site {
    let mut reports: Vec<Report> = Vec::new();
    let mut add = |id: String, rng: &mut ChaCha8Rng| {
        let kind = if rng.gen::<f64>() < cfg.histogram_fraction {
            ReportKind::Histogram
        } else {
            ReportKind::TimeSeries
        };
        reports.push(Report {
            id,
            kind,
            metric: format!("m{}", rng.gen_range(0..cfg.n_metrics)),
            element: format!("e{}", rng.gen_range(0..cfg.n_elements)),
            children: Vec::new(),
        });
        reports.len() - 1
    };
    let home = add("home".into(), rng);
    let g = cfg.goals_per_section;
    let mut hubs = Vec::new();
    let mut sections = Vec::new();
    for s in 0..cfg.n_sections() {
        hubs.push(add(format!("s{s}/hub"), rng));
        let overviews: Vec<usize> = (0..g)
            .map(|i| add(format!("s{s}/overview{i}"), rng))
            .collect();
        let details: Vec<usize> = (0..DETAILS_PER_OVERVIEW * g)
            .map(|i| add(format!("s{s}/detail{i}"), rng))
            .collect();
        let goals: Vec<usize> = (0..g).map(|i| add(format!("s{s}/goal{i}"), rng)).collect();
        sections.push((overviews, details, goals));
    }

    let link = |reports: &mut Vec<Report>, from: usize, to: usize| {
        if !reports[from].children.contains(&to) {
            reports[from].children.push(to);
        }
    };
    for &h in &hubs {
        link(&mut reports, home, h);
    }
    for (s, (overviews, details, goals)) in sections.iter().enumerate() {
        // overview k leads (through its own detail pages) to goal k
        for (k, &o) in overviews.iter().enumerate() {
            link(&mut reports, hubs[s], o);
            link(&mut reports, hubs[s], goals[k]);
            link(&mut reports, o, goals[k]);
            for &d in &details[DETAILS_PER_OVERVIEW * k..DETAILS_PER_OVERVIEW * (k + 1)] {
                link(&mut reports, o, d);
                link(&mut reports, d, goals[k]);
                if g > 1 && rng.gen::<f64>() < cfg.cross_link_probability {
                    let other = (k + rng.gen_range(1..g)) % g;
                    link(&mut reports, d, goals[other]);
                }
            }
        }
    }
    for r in reports.iter_mut() {
        r.children.sort_unstable();
    }

    let goals: Vec<usize> = sections
        .into_iter()
        .flat_map(|(_, _, goals)| goals)
        .collect();
    // low-discrepancy spread so that goals get well separated shapes
    let last = (cfg.series_length - 1) as f64;
    let patterns = (0..goals.len())
        .map(|j| {
            let a = (j as f64 * 0.618_034).fract();
            let b = (j as f64 * 0.381_966 + 0.5).fract();
            Pattern {
                level: 0.2 + b,
                peak: a * last,
                amplitude: 1.6 - b,
                slope: if j % 2 == 0 { 0.08 } else { -0.08 },
            }
        })
        .collect();

    // reachability, children always come later in `reports`
    let mut reaches = vec![BTreeSet::new(); reports.len()];
    for i in (0..reports.len()).rev() {
        let mut set = BTreeSet::new();
        if let Some(gi) = goals.iter().position(|&g| g == i) {
            set.insert(gi);
        }
        for &c in &reports[i].children {
            set.extend(reaches[c].iter().copied());
        }
        reaches[i] = set;
    }
    Site {
        reports,
        goals,
        hubs,
        patterns,
        reaches,
    }
}

/// Builds only the catalogue (deterministic in the seed).
pub fn site(cfg: &SynthConfig) -> Result<Site> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(build_site(cfg, &mut rng))
}

/// A generated user, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: String,
    pub level: usize,
    pub intents: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub hits: Vec<HitRecord>,
    pub users: Vec<PlantedUser>,
}

fn series(
    cfg: &SynthConfig,
    site: &Site,
    report: usize,
    intent: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let rho = cfg.context_signal_strength;
    let pattern = &site.patterns[intent];
    match site.reports[report].kind {
        ReportKind::TimeSeries => (0..cfg.series_length)
            .map(|i| rho * pattern.value(i) + (1.0 - rho) * rng.gen_range(0.0..2.0))
            .collect(),
        ReportKind::Histogram => (0..cfg.n_elements.max(2))
            .map(|_| rho * pattern.level + (1.0 - rho) * rng.gen_range(0.0..2.0))
            .collect(),
    }
}

fn user_hits(
    cfg: &SynthConfig,
    site: &Site,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> (PlantedUser, Vec<HitRecord>) {
    let user_id = format!("user{index:04}");
    let level = rng.gen_range(0..cfg.n_clusters);
    // most intents sit in the user's own section, the rest anywhere
    let g = cfg.goals_per_section;
    let home_section = rng.gen_range(0..site.hubs.len());
    let mut own: Vec<usize> = (home_section * g..(home_section + 1) * g).collect();
    own.shuffle(rng);
    own.truncate(cfg.intent_count.saturating_sub(1).max(1));
    let mut rest: Vec<usize> = (0..site.goals.len()).filter(|i| !own.contains(i)).collect();
    rest.shuffle(rng);
    let mut intents = own;
    intents.extend(
        rest.into_iter()
            .take(cfg.intent_count - intents.len().min(cfg.intent_count)),
    );
    intents.truncate(cfg.intent_count);
    intents.sort_unstable();
    let intent_weights: Vec<f64> = intents.iter().map(|_| rng.gen_range(0.8..1.2)).collect();
    // habitual preference for each link
    let habits: Vec<Vec<f64>> = site
        .reports
        .iter()
        .map(|r| r.children.iter().map(|_| rng.gen_range(0.1..1.0)).collect())
        .collect();

    // each intent has a favourite route through the site
    let routes: Vec<Vec<Option<usize>>> = intents
        .iter()
        .map(|&intent| {
            site.reports
                .iter()
                .map(|r| {
                    let toward: Vec<usize> = (0..r.children.len())
                        .filter(|&i| site.reaches[r.children[i]].contains(&intent))
                        .collect();
                    toward.choose(rng).copied()
                })
                .collect()
        })
        .collect();

    let length = Geometric::new(1.0 / cfg.mean_session_length).expect("probability in (0, 1]");
    let dwell = Exp::new(1.0 / cfg.mean_dwell).expect("positive rate");
    let n_sessions = cfg.sessions_for_level(level);

    let mut starts: Vec<u64> = (0..n_sessions)
        .map(|_| {
            rng.gen_range(0..cfg.days) * DAY + WORKDAY_START + rng.gen_range(0..WORKDAY_LENGTH)
        })
        .collect();
    starts.sort_unstable();

    let mut hits = Vec::new();
    let mut free_at = 0u64;
    for (s, start) in starts.into_iter().enumerate() {
        let weights_total: f64 = intent_weights.iter().sum();
        let mut pick = rng.gen::<f64>() * weights_total;
        let mut which = intents.len() - 1;
        for (i, w) in intent_weights.iter().enumerate() {
            if pick < *w {
                which = i;
                break;
            }
            pick -= w;
        }
        let intent = intents[which];
        let goal = site.goals[intent];

        let mut node = if rng.gen::<f64>() < HOME_ENTRY {
            0
        } else {
            site.hubs[intent / cfg.goals_per_section]
        };
        let n_hits = 1 + length.sample(rng) as usize;
        let mut t = start.max(free_at);
        for h in 0..n_hits {
            let values = series(cfg, site, node, intent, rng);
            let r = &site.reports[node];
            hits.push(HitRecord {
                user_id: user_id.clone(),
                timestamp: t,
                report_id: r.id.clone(),
                kind: r.kind,
                metric: r.metric.clone(),
                dimension_element: r.element.clone(),
                values,
                session_hint: Some(format!("{user_id}-{s}")),
            });
            if h + 1 == n_hits {
                break;
            }
            if node == goal || r.children.is_empty() {
                // reloading the same report is quick
                t += 5 + rng.gen_range(0..10);
                continue;
            }
            t += 5 + dwell.sample(rng).min(1200.0) as u64;
            let toward: Vec<usize> = (0..r.children.len())
                .filter(|&i| site.reaches[r.children[i]].contains(&intent))
                .collect();
            let focused = !toward.is_empty() && rng.gen::<f64>() < cfg.intent_bias;
            let choice = match routes[which][node] {
                Some(preferred) if focused && rng.gen::<f64>() < ROUTE_LOYALTY => preferred,
                _ => {
                    let options: Vec<usize> = if focused {
                        toward
                    } else {
                        (0..r.children.len()).collect()
                    };
                    *options
                        .choose_weighted(rng, |&i| habits[node][i])
                        .expect("non-empty options with positive weights")
                }
            };
            node = r.children[choice];
        }
        // leave an idle gap longer than any sensible session timeout
        free_at = t + 3600;
    }
    let planted = PlantedUser {
        user_id,
        level,
        intents: intents
            .iter()
            .map(|&g| site.reports[site.goals[g]].id.clone())
            .collect(),
    };
    (planted, hits)
}

/// Generates the hit log, ordered by timestamp then user.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let site = build_site(cfg, &mut rng);
    let per_user: Vec<(PlantedUser, Vec<HitRecord>)> = (0..cfg.n_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            user_hits(cfg, &site, i, &mut rng)
        })
        .collect();
    let mut users = Vec::with_capacity(per_user.len());
    let mut hits = Vec::new();
    for (u, h) in per_user {
        users.push(u);
        hits.extend(h);
    }
    hits.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.user_id.cmp(&b.user_id))
    });
    log::info!("generated {} hits for {} users", hits.len(), users.len());
    Ok(SynthOutput { hits, users })
}
