pub mod assign;
pub mod eval;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod pseudolabel;
pub mod scene;
pub mod tensor;
pub mod training;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scenes.md")]
pub mod book_scenes {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod book_autodiff {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
pub mod book_model {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pseudo_labels.md")]
pub mod book_pseudo_labels {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/losses.md")]
pub mod book_losses {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod book_cli {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/results.md")]
pub mod book_results {}
