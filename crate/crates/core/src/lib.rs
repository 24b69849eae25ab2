//! Skill-handbook learning and cost-aware agent routing.
//!
//! A [`handbook::Handbook`] records which skills each operational mode
//! needs and how competent each agent is at them. The [`router`] picks an
//! agent per turn by expected competence minus a cost penalty; the
//! [`learner`], [`refiner`] and [`selector`] build that handbook from
//! exploratory trajectories; the [`simulator`] provides a world with known
//! ground truth to check all of it against; the [`gateway`] connects the
//! same router to HTTP agents and services.

pub mod competence;
pub mod config;
pub mod gateway;
pub mod handbook;
pub mod learner;
pub mod metrics;
pub mod pipeline;
pub mod refiner;
pub mod router;
pub mod selector;
pub mod simulator;
pub mod text;
pub mod trajectory;
