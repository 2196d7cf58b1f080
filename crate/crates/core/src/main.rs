fn main() {
    std::process::exit(gkpile::cli::run(std::env::args_os()));
}
