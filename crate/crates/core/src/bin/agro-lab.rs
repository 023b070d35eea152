fn main() {
    std::process::exit(agro::cli::main_from_env());
}
