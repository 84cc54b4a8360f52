pub mod flat_reference;
