//! MOOC dropout prediction toolkit.
//!
//! * [`dataset`]: course/student/activity model, CSV tables, synthetic courses.
//! * [`features`]: cumulative clickstream + demographic feature matrices and normalization.
//! * [`linear`]: L2-regularized logistic regression, hyperplane averaging, baselines.
//! * [`deepnet`]: ReLU/softmax feed-forward nets, SGD, Net2Wider / Net2Deeper growth.
//! * [`paradigms`]: post-hoc, same-field, multi-course and in-situ training schedules.
//! * [`evaluate`]: AUC, SEM, accuracy and report files.
//! * [`cli`]: the `dropoutlab` command-line front end.

pub mod cli;
pub mod dataset;
pub mod deepnet;
pub mod evaluate;
pub mod features;
pub mod linear;
pub mod matrix;
pub mod paradigms;
pub mod seed;
