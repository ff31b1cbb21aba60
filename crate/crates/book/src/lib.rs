//! The guide's chapters, compiled as doc-tests so their listings stay in
//! sync with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/synthetic_data.md")]
pub mod synthetic_data {}
#[doc = include_str!("../../../book/src/grounding.md")]
pub mod grounding {}
#[doc = include_str!("../../../book/src/overlap_audit.md")]
pub mod overlap_audit {}
#[doc = include_str!("../../../book/src/slice_discovery.md")]
pub mod slice_discovery {}
#[doc = include_str!("../../../book/src/keywords.md")]
pub mod keywords {}
#[doc = include_str!("../../../book/src/mitigation.md")]
pub mod mitigation {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/command_line.md")]
pub mod command_line {}
