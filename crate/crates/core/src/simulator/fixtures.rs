//! Hand-built worlds with a known refinement answer.
//!
//! `confounded` registers one skill that secretly spans two latent skills
//! with opposite agent rankings; `duplicated` registers two skills that both
//! describe the same latent skill.

use std::collections::BTreeMap;

use super::{
    simulate_bundles, BundleProtocol, Heterogeneity, LatentSkill, LatentWorld, QueryTemplate, RewardModel, SimAgent,
    SimQuery, SuccessModel, WorldSpec,
};
use crate::handbook::{Handbook, ModeMetadata, Skill, SkillId};
use crate::learner::{build_profiles, Attribution, JudgeConfig, TrajectoryBundle};
use crate::router::{RouterConfig, RulePolicy, ANSWER_MODE};

pub struct RefinementFixture {
    pub world: LatentWorld,
    pub queries: Vec<SimQuery>,
    /// Profiles rebuilt from `bundles` with step attribution.
    pub handbook: Handbook,
    pub bundles: Vec<TrajectoryBundle>,
    /// The skill to split, or the pair to merge.
    pub targets: Vec<SkillId>,
    pub judge: JudgeConfig,
}

fn vocab(prefix: &str) -> Vec<String> {
    (0..6).map(|i| format!("{prefix}{i}")).collect()
}

fn world(latents: Vec<LatentSkill>, agents: Vec<(&str, Vec<(&str, f64)>)>, templates: Vec<(&str, &str)>) -> LatentWorld {
    let modes = vec!["code".to_string(), ANSWER_MODE.to_string()];
    LatentWorld {
        seed: 0,
        spec: WorldSpec {
            modes: 2,
            latent_skills_per_mode: latents.len(),
            agents: agents.len(),
            heterogeneity: Heterogeneity::Mild,
            vocab_per_skill: 6,
            cues_per_query: 2,
            query_templates: templates.len(),
            mode_probability: 1.0,
            cost_noise: 0.0,
            success_model: SuccessModel::Mean,
            reward_model: RewardModel::Binary,
        },
        agents: agents
            .into_iter()
            .map(|(id, ps)| SimAgent {
                id: id.to_string(),
                success: ps.into_iter().map(|(s, p)| (s.to_string(), p)).collect(),
                cost: modes.iter().map(|m| (m.clone(), 0.2)).collect(),
            })
            .collect(),
        templates: templates
            .into_iter()
            .map(|(id, code_latent)| QueryTemplate {
                id: id.to_string(),
                modes: modes.clone(),
                latent: BTreeMap::from([
                    ("code".to_string(), vec![code_latent.to_string()]),
                    (ANSWER_MODE.to_string(), vec!["answer_l0".to_string()]),
                ]),
            })
            .collect(),
        modes,
        latent_skills: latents,
    }
}

fn latent(id: &str, mode: &str, prefix: &str) -> LatentSkill {
    LatentSkill {
        id: id.into(),
        mode: mode.into(),
        vocabulary: vocab(prefix),
    }
}

fn skill(id: &str, mode: &str, indicators: Vec<String>) -> Skill {
    Skill {
        id: id.into(),
        description: format!("registered {id}"),
        indicators,
        parent: None,
        mode: mode.into(),
    }
}

fn finish(world: LatentWorld, skills: Vec<Skill>, targets: Vec<SkillId>, n_queries: usize, seed: u64) -> RefinementFixture {
    let queries = world.sample_queries(n_queries, seed, "fixture");
    let mut base = Handbook {
        version: 1,
        provenance: "v1: refinement fixture".into(),
        modes: world
            .modes
            .iter()
            .map(|m| ModeMetadata {
                mode: m.clone(),
                insights: vec![],
                allowed_agents: world.agent_ids(),
            })
            .collect(),
        edges: world.modes.iter().map(|m| (m.clone(), vec![])).collect(),
        ..Default::default()
    };
    for s in skills {
        base.insert_skill(s);
    }
    let policy = RulePolicy::needs_table("fixture", &["code"]);
    let protocol = BundleProtocol {
        designated_modes: vec!["code".into()],
        seed,
    };
    let bundles = simulate_bundles(&world, &queries, &base, &policy, &RouterConfig::default(), &protocol)
        .expect("fixture world routes");
    let judge = JudgeConfig {
        attribution: Attribution::Step,
        success_threshold: 0.5,
        retrieval_k: 3,
        retrieval_threshold: 0.05,
    };
    let handbook = build_profiles(&base, &bundles, &judge).expect("fixture profiles");
    RefinementFixture {
        world,
        queries,
        handbook,
        bundles,
        targets,
        judge,
    }
}

/// One registered `code` skill whose indicators cover two latent skills;
/// `agent0` is strong on the first and weak on the second, `agent1` the
/// reverse.
pub fn confounded(n_queries: usize, seed: u64) -> RefinementFixture {
    let w = world(
        vec![latent("code_l0", "code", "alpha"), latent("code_l1", "code", "omega"), latent("answer_l0", ANSWER_MODE, "reply")],
        vec![
            ("agent0", vec![("code_l0", 0.92), ("code_l1", 0.08), ("answer_l0", 0.9)]),
            ("agent1", vec![("code_l0", 0.1), ("code_l1", 0.9), ("answer_l0", 0.9)]),
        ],
        vec![("tpl0", "code_l0"), ("tpl1", "code_l1")],
    );
    let mut indicators = vocab("alpha");
    indicators.extend(vocab("omega"));
    let skills = vec![skill("code_mixed", "code", indicators), skill("answer_main", ANSWER_MODE, vocab("reply"))];
    finish(w, skills, vec!["code_mixed".into()], n_queries, seed)
}

/// Two registered `code` skills with overlapping halves of one latent
/// vocabulary; every agent performs identically on both in expectation.
pub fn duplicated(n_queries: usize, seed: u64) -> RefinementFixture {
    let w = world(
        vec![latent("code_l0", "code", "alpha"), latent("answer_l0", ANSWER_MODE, "reply")],
        vec![
            ("agent0", vec![("code_l0", 0.85), ("answer_l0", 0.9)]),
            ("agent1", vec![("code_l0", 0.5), ("answer_l0", 0.9)]),
            ("agent2", vec![("code_l0", 0.2), ("answer_l0", 0.9)]),
        ],
        vec![("tpl0", "code_l0")],
    );
    let v = vocab("alpha");
    let skills = vec![
        skill("code_first", "code", v[..4].to_vec()),
        skill("code_second", "code", v[2..].to_vec()),
        skill("answer_main", ANSWER_MODE, vocab("reply")),
    ];
    finish(w, skills, vec!["code_first".into(), "code_second".into()], n_queries, seed)
}
