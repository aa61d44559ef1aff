pub mod amp;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod kinematics;
pub mod mocap;
pub mod nn;
pub mod rewards;
pub mod sim;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/reference-motions.md")]
    mod reference_motions {}
    #[doc = include_str!("../../../book/src/discriminator.md")]
    mod discriminator {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
