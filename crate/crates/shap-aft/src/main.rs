fn main() {
    std::process::exit(shap_aft::cli::main_entry());
}
