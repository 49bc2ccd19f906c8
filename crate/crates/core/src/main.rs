fn main() {
    std::process::exit(surdo_sep::cli::run(std::env::args_os()));
}
