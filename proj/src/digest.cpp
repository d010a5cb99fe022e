// SPDX-License-Identifier: Apache-2.0
#include <openssl/evp.h>

#include <cstring>
#include <memory>

#include "hydra/denoiser.hpp"
#include "hydra/errors.hpp"

namespace hydra {

// sha-256 over every frozen tensor in declaration order. Each tensor
// contributes its name (NUL-terminated), element count (LE u64) and raw
// little-endian f64 payload, so renames and shape changes alter the digest.
std::string base_digest(const DenoiserParams& params) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
        throw AuditError("sha-256 context initialization failed");
    }
    for (const auto& [name, vec] : base_tensors(params)) {
        EVP_DigestUpdate(ctx.get(), name.data(), name.size() + 1);
        std::uint64_t n = vec->size();
        unsigned char nbuf[8];
        for (int i = 0; i < 8; ++i) nbuf[i] = static_cast<unsigned char>((n >> (8 * i)) & 0xFF);
        EVP_DigestUpdate(ctx.get(), nbuf, sizeof(nbuf));
        for (double d : *vec) {
            std::uint64_t bits;
            std::memcpy(&bits, &d, sizeof(bits));
            unsigned char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
            EVP_DigestUpdate(ctx.get(), buf, sizeof(buf));
        }
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md, &md_len) != 1) {
        throw AuditError("sha-256 finalization failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * md_len);
    for (unsigned int i = 0; i < md_len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

}  // namespace hydra
