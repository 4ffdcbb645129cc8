// The guide chapters under book/src/ double as doctests: each chapter is
// included as the doc comment of an empty module, so `cargo test --doc`
// compiles and runs every Rust snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/mdps-and-trajectories.md")]
pub mod mdps_and_trajectories {}

#[doc = include_str!("../../../book/src/softmax-policies.md")]
pub mod softmax_policies {}

#[doc = include_str!("../../../book/src/rewards-and-preferences.md")]
pub mod rewards_and_preferences {}

#[doc = include_str!("../../../book/src/lower-level.md")]
pub mod lower_level {}

#[doc = include_str!("../../../book/src/hypergradients.md")]
pub mod hypergradients {}

#[doc = include_str!("../../../book/src/alignment-loop.md")]
pub mod alignment_loop {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/cli-and-formats.md")]
pub mod cli_and_formats {}
